//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mixpipe::assign::{hungarian_assign, CostMatrix};
use mixpipe::bench::bench_centroids;
use mixpipe::centroids::{ema_update, recompute_full, CentroidsMemory};
use mixpipe::config::PipelineConfig;
use mixpipe::eval::evaluate_manifest;
use mixpipe::relabel::run_relabeling_epoch;
use mixpipe::rng::{stage_rng, Stage};
use mixpipe::sampler::{
    compose_minibatch, median, multicam_memory, next_pairs, queue_capacity, strategy_cost, ExclusionQueue, ImagePools,
    PairingStrategy,
};
use mixpipe::similarity::{cosine_similarity, pairwise_similarity};
use mixpipe::synth::{generate, score_partition, SynthSpec};
use mixpipe::trainloop::{
    augmentation_loss, camera_centroids_loss, centroids_loss, encode, instance_loss, momentum_update, run_training,
    EncoderParams, Rows,
};
use mixpipe::{Pid, SampleId, Source};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

// 1 ----------------------------------------------------------------------

/// Minimum over all injective row -> column maps, pruned on the running sum
/// (costs are non-negative so pruning never drops the optimum).
fn brute_force_min(c: &CostMatrix) -> f64 {
    fn rec(c: &CostMatrix, i: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if i == c.rows() {
            *best = acc;
            return;
        }
        for j in 0..c.cols() {
            if !used[j] {
                used[j] = true;
                rec(c, i + 1, used, acc + c.get(i, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
    best
}

fn hungarian_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut mismatches = 0;
    let trials = 1000;
    for _ in 0..trials {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(n..=10);
        let data = (0..n * m).map(|_| rng.random_range(0..50) as f64).collect();
        let c = CostMatrix::new(n, m, data).unwrap();
        let a = hungarian_assign(&c).map_err(|e| e.to_string())?;
        let distinct: BTreeSet<usize> = a.columns.iter().copied().collect();
        if a.total != brute_force_min(&c) || distinct.len() != n {
            mismatches += 1;
        }
    }
    check(mismatches == 0, || format!("{mismatches} mismatches"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("{trials} matrices, 0 mismatches, {:.2}s", start.elapsed().as_secs_f64()))
}

// 2 ----------------------------------------------------------------------

fn ema_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=16);
        let n = rng.random_range(1..=6);
        let mut entries = BTreeMap::new();
        let mut means = BTreeMap::new();
        for p in 0..n as Pid {
            let mu: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            entries.insert(p, mu);
            if rng.random_bool(0.7) {
                means.insert(p, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f32>>());
            }
        }
        let alpha: f64 = rng.random_range(0.0..1.0);
        let mut mem = CentroidsMemory::from_entries(dim, entries.clone()).map_err(|e| e.to_string())?;
        ema_update(&mut mem, &means, alpha).map_err(|e| e.to_string())?;
        for (p, mu) in &entries {
            let got = mem.get(*p).unwrap();
            for d in 0..dim {
                let want = match means.get(p) {
                    Some(m) => alpha * mu[d] as f64 + (1.0 - alpha) * m[d] as f64,
                    None => mu[d] as f64,
                };
                worst = worst.max((got[d] as f64 - want).abs());
            }
        }
    }
    check(worst <= 1e-6, || format!("closed-form gap {worst:e}"))?;

    // alpha = 0 with K covering every image reproduces a full recompute.
    let spec = SynthSpec { num_multicam_pids: 4, num_singlecam_pids: 30, images_per_pid: 9, dim_raw: 24, seed: 22, ..SynthSpec::default() };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        alpha: 0.0,
        k_per_pid: 9,
        tau_remove: 0.0,
        tau_rel: 1.0,
        tau_merge: 1.0,
        ..PipelineConfig::default()
    };
    let mut start_mem = CentroidsMemory::new(24);
    for p in recompute_full(&data.manifest, &data.features).unwrap().pids() {
        start_mem.insert(p, (0..24).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    }
    let mut r = stage_rng(1, Stage::Relabel);
    let out = run_relabeling_epoch(&data.manifest, &data.features, |x| Ok(x.clone()), &start_mem, &cfg, &mut r)
        .map_err(|e| e.to_string())?;
    let full = recompute_full(&data.manifest, &data.features).map_err(|e| e.to_string())?;
    check(out.memory.len() == full.len(), || "pid sets differ".into())?;
    let mut worst_rel: f64 = 0.0;
    for (p, v) in full.iter() {
        let got = out.memory.get(p).ok_or(format!("pid {p} missing"))?;
        let diff: f64 = v.iter().zip(got).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        worst_rel = worst_rel.max(diff / norm);
    }
    check(worst_rel <= 1e-5, || format!("alpha=0 gap {worst_rel:e}"))?;
    Ok(format!("100 cases max gap {worst:.1e}; alpha=0 vs full recompute rel gap {worst_rel:.1e}"))
}

// 3 ----------------------------------------------------------------------

fn relabel_separable() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        num_multicam_pids: 8,
        num_singlecam_pids: 60,
        images_per_pid: 12,
        num_cameras: 4,
        dim_raw: 32,
        intra_noise_sigma: 0.03,
        camera_bias_norm: 0.03,
        min_inter_angle_cos: 0.25,
        frag_rate: 0.2,
        frag_parts: 3,
        mislabel_rate: 0.03,
        junk_rate: 0.03,
        junk_max_cos: 0.3,
        seed: 33,
        ..SynthSpec::default()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let truth = &data.truth;

    // Verify the separation the criterion asks for on the generated data.
    let single: Vec<usize> = data
        .manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.source == Source::SingleCamera)
        .map(|(i, _)| i)
        .collect();
    let mut min_intra: f64 = 1.0;
    let mut max_inter: f64 = -1.0;
    for (a, &i) in single.iter().enumerate() {
        let ti = truth.true_pid[&data.manifest.records()[i].sample_id];
        for &j in &single[a + 1..] {
            let tj = truth.true_pid[&data.manifest.records()[j].sample_id];
            if let (Some(x), Some(y)) = (ti, tj) {
                let c = cosine_similarity(data.features.row(i), data.features.row(j)).unwrap();
                if x == y {
                    min_intra = min_intra.min(c);
                }
            }
        }
    }
    let anchors: Vec<&Vec<f32>> = data.anchors.values().collect();
    for (a, x) in anchors.iter().enumerate() {
        for y in &anchors[a + 1..] {
            max_inter = max_inter.max(cosine_similarity(x, y).unwrap());
        }
    }
    check(min_intra > 0.9 && max_inter < 0.3, || format!("data not separable: intra {min_intra:.3}, inter {max_inter:.3}"))?;

    let junk: BTreeSet<SampleId> = truth.junk_ids().collect();
    let surplus = truth.fragment_map.len();
    check(!junk.is_empty() && surplus > 0 && !truth.mislabel_set.is_empty(), || "no noise injected".into())?;

    // Mislabels can push a pid above images_per_pid, so K is sized to cover
    // every labelled group.
    let cfg = PipelineConfig { k_per_pid: 2 * spec.images_per_pid, ..PipelineConfig::default() };
    let mut rng = stage_rng(cfg.seed, Stage::Relabel);
    let memory = recompute_full(&data.manifest, &data.features).map_err(|e| e.to_string())?;
    let out = run_relabeling_epoch(&data.manifest, &data.features, |x| Ok(x.clone()), &memory, &cfg, &mut rng)
        .map_err(|e| e.to_string())?;

    let predicted: BTreeMap<SampleId, Pid> = out
        .manifest
        .records()
        .iter()
        .filter(|r| r.source == Source::SingleCamera && !out.removed.contains(&r.sample_id))
        .map(|r| (r.sample_id, r.pid))
        .collect();
    let score = score_partition(&predicted, truth).map_err(|e| e.to_string())?;
    check(score.f1 == 1.0, || format!("pairwise F1 {}", score.f1))?;
    check(out.removed == junk, || format!("removed {} images, injected {} junk", out.removed.len(), junk.len()))?;
    let delta = out.report.pids_before - out.report.pids_after;
    check(delta == surplus, || format!("pid delta {delta}, fragment surplus {surplus}"))?;
    check(out.report.pids_after == spec.num_singlecam_pids, || "pid count differs from identity count".into())?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "F1 1.0, removed {} of {} junk, {} images relabeled, pids {} -> {} ({:.2}s)",
        out.removed.len(),
        junk.len(),
        out.report.n_relabeled,
        out.report.pids_before,
        out.report.pids_after,
        start.elapsed().as_secs_f64()
    ))
}

// 4, 5 -------------------------------------------------------------------

/// Desk-scale sampling fixture: some multi-camera pids see fewer cameras
/// than N_K so the spread rule is exercised at its cap.
fn sampling_fixture() -> (mixpipe::DatasetManifest, mixpipe::EmbeddingMatrix) {
    let spec = SynthSpec {
        num_multicam_pids: 24,
        num_singlecam_pids: 96,
        images_per_pid: 10,
        num_cameras: 5,
        dim_raw: 32,
        seed: 44,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    // Drop cameras 2..4 from every third multi pid.
    let keep: Vec<usize> = data
        .manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| !(r.source == Source::MultiCamera && r.pid % 3 == 0 && r.context_id >= 2))
        .map(|(i, _)| i)
        .collect();
    let records = keep.iter().map(|&i| data.manifest.records()[i]).collect();
    (mixpipe::DatasetManifest::new(records).unwrap(), data.features.gather(&keep))
}

fn batch_shapes() -> Outcome {
    let (manifest, features) = sampling_fixture();
    let memory = recompute_full(&manifest, &features).unwrap();
    let multi = multicam_memory(&manifest, &features, None).unwrap();
    let pools = ImagePools::from_manifest(&manifest, &BTreeSet::new());
    let cams = pools.cameras_per_multi_pid();
    let cfg = PipelineConfig { iterations_per_epoch: 50, ..PipelineConfig::default() };
    let mut queue = ExclusionQueue::new(queue_capacity(cfg.queue_epochs, cfg.iterations_per_epoch, 8, memory.len()));
    let mut rng = stage_rng(4, Stage::Sampler);
    let mut violations = Vec::new();
    for _ in 0..1000 {
        let step = next_pairs(&multi, &memory, &mut queue, PairingStrategy::Median, 8, None, &mut rng).map_err(|e| e.to_string())?;
        let plan = compose_minibatch(&step.pairs, &pools, 4, &mut rng).map_err(|e| e.to_string())?;
        if plan.sample_ids.len() != 64 {
            violations.push(format!("{} samples", plan.sample_ids.len()));
        }
        violations.extend(plan.violations(8, 4, &cams));
    }
    check(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    Ok("1000 plans of 64 samples, 8+8 pids, full camera spread".into())
}

fn queue_exclusion() -> Outcome {
    let (manifest, features) = sampling_fixture();
    let memory = recompute_full(&manifest, &features).unwrap();
    let multi = multicam_memory(&manifest, &features, None).unwrap();
    let mut summary = Vec::new();
    // The full 30-epoch window (capped by the pool) and a shorter one.
    for (queue_epochs, iters) in [(30usize, 20usize), (1, 4)] {
        let cap = queue_capacity(queue_epochs, iters, 8, memory.len());
        let mut queue = ExclusionQueue::new(cap);
        let mut rng = stage_rng(5, Stage::Sampler);
        let mut stream: Vec<Pid> = Vec::new();
        for _ in 0..30 * iters {
            let step = next_pairs(&multi, &memory, &mut queue, PairingStrategy::Median, 8, None, &mut rng).map_err(|e| e.to_string())?;
            stream.extend(step.pairs.iter().map(|p| p.single_pid));
        }
        let mut violations = 0;
        let mut last_seen: BTreeMap<Pid, usize> = BTreeMap::new();
        for (t, &p) in stream.iter().enumerate() {
            if let Some(&prev) = last_seen.get(&p) {
                if t - prev <= cap {
                    violations += 1;
                }
            }
            last_seen.insert(p, t);
        }
        check(violations == 0, || format!("{violations} repeats inside a window of {cap}"))?;
        summary.push(format!("capacity {cap}: {} selections", stream.len()));
    }
    Ok(format!("0 repeats ({})", summary.join(", ")))
}

// 6 ----------------------------------------------------------------------

fn strategy_ordering() -> Outcome {
    let (manifest, features) = sampling_fixture();
    let memory = recompute_full(&manifest, &features).unwrap();
    let multi = multicam_memory(&manifest, &features, None).unwrap();
    let (_, single_mat) = memory.to_matrix();
    let multi_pids: Vec<Pid> = multi.pids().collect();
    let iterations = 200;
    let (mut dev_median, mut dev_random) = (0.0, 0.0);
    for t in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + t);
        let picked: Vec<Pid> = rand::seq::index::sample(&mut rng, multi_pids.len(), 8).into_iter().map(|i| multi_pids[i]).collect();
        let s = pairwise_similarity(&multi.matrix_of(&picked).unwrap(), &single_mat).unwrap();
        let med = median(s.values());
        let mut totals = BTreeMap::new();
        for strategy in PairingStrategy::ALL {
            let mut srng = ChaCha8Rng::seed_from_u64(9000 + t);
            let cost = strategy_cost(&s, strategy, &mut srng).map_err(|e| e.to_string())?;
            let a = hungarian_assign(&cost).map_err(|e| e.to_string())?;
            let sims: Vec<f64> = a.columns.iter().enumerate().map(|(i, &j)| s.get(i, j)).collect();
            let dev = sims.iter().map(|x| (x - med).abs()).sum::<f64>() / sims.len() as f64;
            match strategy {
                PairingStrategy::Median => dev_median += dev,
                PairingStrategy::Random => dev_random += dev,
                _ => {}
            }
            totals.insert(strategy.name(), sims.iter().sum::<f64>());
        }
        let eps = 1e-9;
        for mid in ["random", "mean", "median"] {
            check(totals["soft"] <= totals[mid] + eps && totals[mid] <= totals["hard"] + eps, || {
                format!("iteration {t}: soft {} {mid} {} hard {}", totals["soft"], totals[mid], totals["hard"])
            })?;
        }
    }
    dev_median /= iterations as f64;
    dev_random /= iterations as f64;
    check(dev_median <= dev_random, || format!("median deviation {dev_median} > random {dev_random}"))?;
    Ok(format!(
        "{iterations} iterations ordered; mean |sim - median| median {dev_median:.4} vs random {dev_random:.4}"
    ))
}

// 7 ----------------------------------------------------------------------

fn fd_rel_error(x: &Rows, analytic: &Rows, f: impl Fn(&Rows) -> f64) -> f64 {
    let h = 1e-4;
    let (mut diff, mut a2, mut f2) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for d in 0..x[i].len() {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i][d] += h;
            down[i][d] -= h;
            let g = (f(&up) - f(&down)) / (2.0 * h);
            diff += (g - analytic[i][d]).powi(2);
            a2 += analytic[i][d].powi(2);
            f2 += g * g;
        }
    }
    diff.sqrt() / f64::max(a2, f2).sqrt().max(1e-12)
}

fn gradient_checks() -> Outcome {
    let tau = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let n = rng.random_range(4..=16);
        let dim = rng.random_range(2..=16);
        let k = rng.random_range(2..=(n / 2).min(4));
        let rows = |rng: &mut ChaCha8Rng| -> Rows { (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
        let x = rows(&mut rng);
        let xa = rows(&mut rng);
        let pids: Vec<Pid> = (0..n).map(|i| (i % k) as Pid).collect();
        let cams: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let cents: BTreeMap<Pid, Vec<f64>> = (0..k as Pid).map(|p| (p, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();

        let g = instance_loss(&x, &pids, tau).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(fd_rel_error(&x, &g.grad, |y| instance_loss(y, &pids, tau).unwrap().value));
        let g = augmentation_loss(&x, &xa, &pids, tau).map_err(|e| e.to_string())?;
        worst[1] = worst[1]
            .max(fd_rel_error(&x, &g.grad, |y| augmentation_loss(y, &xa, &pids, tau).unwrap().value))
            .max(fd_rel_error(&xa, &g.grad_aug, |y| augmentation_loss(&x, y, &pids, tau).unwrap().value));
        let g = centroids_loss(&x, &pids, &cents, tau).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(fd_rel_error(&x, &g.grad, |y| centroids_loss(y, &pids, &cents, tau).unwrap().value));
        let g = camera_centroids_loss(&x, &pids, &cams, tau).map_err(|e| e.to_string())?;
        worst[3] = worst[3].max(fd_rel_error(&x, &g.grad, |y| camera_centroids_loss(y, &pids, &cams, tau).unwrap().value));
    }
    check(worst.iter().all(|&w| w < 1e-4), || format!("worst relative errors {worst:?}"))?;
    Ok(format!(
        "50 batches; worst rel. error ins {:.1e} aug {:.1e} cen {:.1e} cc {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// 8 ----------------------------------------------------------------------

fn momentum_contraction() -> Outcome {
    let lambda = 0.999;
    let mut rng = stage_rng(8, Stage::Train);
    let theta_e = EncoderParams::random(12, 8, &mut rng);
    let mut theta_m = EncoderParams::random(12, 8, &mut rng);
    let d0 = theta_m.distance(&theta_e).unwrap();
    let mut prev = d0;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        theta_m = momentum_update(&theta_m, &theta_e, lambda).map_err(|e| e.to_string())?;
        let d = theta_m.distance(&theta_e).unwrap();
        worst = worst.max((d - lambda * prev).abs());
        prev = d;
    }
    worst = worst.max((prev - d0 * lambda.powi(10)).abs());
    check(worst <= 1e-9, || format!("contraction error {worst:e}"))?;
    Ok(format!("gap {d0:.4} -> {prev:.4} after 10 steps, max error {worst:.1e}"))
}

// 9 ----------------------------------------------------------------------

fn efficiency_ratio() -> Outcome {
    let spec = SynthSpec { num_multicam_pids: 4, num_singlecam_pids: 50, images_per_pid: 24, dim_raw: 32, seed: 9, ..SynthSpec::default() };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let t = bench_centroids(&data.manifest, &data.features, &[2, 4, 8], &PipelineConfig::default()).map_err(|e| e.to_string())?;
    let k4 = t.for_k(4).unwrap();
    check(k4.ratio == 6.0, || format!("naive/K=4 ratio {}", k4.ratio))?;
    let c = |k| t.for_k(k).unwrap().embeddings;
    check(c(4) == 2 * c(2) && c(8) == 4 * c(2), || format!("counts {} {} {}", c(2), c(4), c(8)))?;
    Ok(format!("naive {} vs K=4 {} -> ratio 6.0; K=2/4/8 counts {}:{}:{}", t.naive().embeddings, c(4), c(2), c(4), c(8)))
}

// 10 ---------------------------------------------------------------------

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        num_multicam_pids: 32,
        num_singlecam_pids: 64,
        images_per_pid: 12,
        dim_raw: 64,
        identity_dim: 32,
        nuisance_sigma: 0.3,
        num_eval_pids: 24,
        frag_rate: 0.1,
        junk_rate: 0.02,
        mislabel_rate: 0.02,
        seed: 7,
        ..SynthSpec::default()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig { epochs: 20, iterations_per_epoch: 30, seed: 1, ..PipelineConfig::default() };
    let out = run_training(&data.manifest, &data.features, &cfg).map_err(|e| e.to_string())?;
    let before = evaluate_manifest(&data.manifest, &encode(&out.initial, &data.features).unwrap()).map_err(|e| e.to_string())?;
    let after = evaluate_manifest(&data.manifest, &encode(&out.momentum, &data.features).unwrap()).map_err(|e| e.to_string())?;
    check(after.rank1 > before.rank1, || format!("Rank-1 {} -> {}", before.rank1, after.rank1))?;
    within(start.elapsed(), 300.0)?;
    Ok(format!(
        "Rank-1 {:.3} -> {:.3}, mAP {:.3} -> {:.3} ({:.1}s)",
        before.rank1,
        after.rank1,
        before.map,
        after.map,
        start.elapsed().as_secs_f64()
    ))
}

// 11 ---------------------------------------------------------------------

fn mixpipe(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mixpipe"))
        .arg("--quiet")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("mixpipe {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let spec_path = root.join("spec.cfg");
    std::fs::write(
        &spec_path,
        "num_multicam_pids = 12\nnum_singlecam_pids = 24\nimages_per_pid = 8\ndim_raw = 32\nnum_eval_pids = 8\n\
         frag_rate = 0.1\njunk_rate = 0.02\nmislabel_rate = 0.02\nidentity_dim = 24\nnuisance_sigma = 0.2\n",
    )
    .unwrap();
    let cfg_path = root.join("pipeline.cfg");
    std::fs::write(&cfg_path, "n_p = 4\nn_k = 4\niterations_per_epoch = 5\nepochs = 3\nqueue_epochs = 2\n").unwrap();

    let run = root.join("run");
    let gen = run.join("gen");
    let (m, f) = (s(&gen.join("manifest.tsv")), s(&gen.join("features.mxeb")));
    mixpipe(&["gen", "--spec", &s(&spec_path), "--seed", "3", "--out", &s(&gen)])?;
    let cfg = s(&cfg_path);
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("relabel", vec!["relabel".into(), "--config".into(), cfg.clone(), "--truth".into(), s(&gen.join("truth.tsv"))]),
        ("centroids", vec!["centroids".into()]),
        ("sample", vec!["sample".into(), "--config".into(), cfg.clone(), "--strategy".into(), "median".into(), "--iterations".into(), "20".into()]),
        ("train", vec!["train".into(), "--config".into(), cfg.clone(), "--seed".into(), "5".into()]),
        ("bench", vec!["bench".into(), "--k".into(), "2,4".into()]),
    ];
    for (name, args) in &steps {
        let mut a: Vec<String> = args.clone();
        a.extend(["--manifest".into(), m.clone(), "--features".into(), f.clone(), "--out".into(), s(&run.join(name))]);
        mixpipe(&a.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    mixpipe(&[
        "eval",
        "--manifest",
        &m,
        "--features",
        &f,
        "--encoder",
        &s(&run.join("train/momentum.mxeb")),
        "--out",
        &s(&run.join("eval")),
    ])?;

    let replay = root.join("replay");
    let mut names = vec!["gen"];
    names.extend(steps.iter().map(|(n, _)| *n));
    names.push("eval");
    for name in &names {
        mixpipe(&["replay", "--meta", &s(&run.join(name).join("run.meta")), "--out", &s(&replay.join(name))])?;
    }
    let a = collect_files(&run);
    let b = collect_files(&replay);
    check(a.keys().eq(b.keys()), || "replay produced a different file set".into())?;
    let differing: Vec<String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    check(differing.is_empty(), || format!("differing files: {}", differing.join(", ")))?;
    Ok(format!("{} files across {} runs byte-identical on replay", a.len(), names.len()))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("hungarian oracle equivalence", hungarian_oracle),
        ("EMA closed form and full-recompute agreement", ema_exactness),
        ("relabeling on separable data", relabel_separable),
        ("mini-batch shape invariants", batch_shapes),
        ("exclusion queue window", queue_exclusion),
        ("pairing strategy ordering", strategy_ordering),
        ("loss gradient checks", gradient_checks),
        ("momentum contraction", momentum_contraction),
        ("subset vs full embedding cost", efficiency_ratio),
        ("end-to-end Rank-1 improvement", end_to_end),
        ("replay determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  criterion {:>2}  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {:>2}  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
