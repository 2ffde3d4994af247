//! Training: each epoch refines the single-camera labels with the momentum
//! encoder, then runs mixed-batch gradient steps on the encoder and folds
//! them into the momentum encoder.

mod encoder;
mod losses;

pub use encoder::{encode, momentum_update, EncoderParams};
pub use losses::{
    augmentation_loss, camera_centroids_loss, centroids_loss, instance_loss, total_loss, LossBreakdown, LossGrad,
    PairLossGrad, Rows,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};

use crate::centroids::{initialize_centroids, recompute_full, CentroidsMemory};
use crate::config::{Bootstrap, PipelineConfig};
use crate::error::{Error, Result};
use crate::relabel::{run_relabeling_epoch, select_epoch_subset, RefinementReport};
use crate::rng::{stage_rng, Stage, StageRng};
use crate::sampler::{multicam_memory, next_pairs, compose_minibatch, queue_capacity, ExclusionQueue, ImagePools, MiniBatchPlan};
use crate::types::{DatasetManifest, EmbeddingMatrix, Pid, Source};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: LossBreakdown,
}

pub const LOSS_CURVE_HEADER: &str = "epoch\titeration\tl_ins\tl_aug\tl_cen\tl_cc\ttotal";

pub fn format_loss_curve(curve: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CURVE_HEADER);
    out.push('\n');
    for r in curve {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.iteration, l.l_ins, l.l_aug, l.l_cen, l.l_cc, l.total
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// The untrained starting point shared by both encoders.
    pub initial: EncoderParams,
    pub encoder: EncoderParams,
    pub momentum: EncoderParams,
    pub reports: Vec<RefinementReport>,
    pub curve: Vec<LossRecord>,
    /// Labels after the last refinement epoch.
    pub manifest: DatasetManifest,
    pub memory: CentroidsMemory,
}

/// The encoder both networks start from: Gaussian weights drawn first from
/// the train stream.
pub fn initial_encoder(d_in: usize, config: &PipelineConfig) -> EncoderParams {
    let d_out = if config.embed_dim == 0 { d_in } else { config.embed_dim };
    EncoderParams::random(d_in, d_out, &mut stage_rng(config.seed, Stage::Train))
}

/// Starting single-camera memory, embedded with `theta_m`.
pub fn bootstrap_memory(
    manifest: &DatasetManifest,
    features: &EmbeddingMatrix,
    theta_m: &EncoderParams,
    config: &PipelineConfig,
    rng: &mut StageRng,
) -> Result<CentroidsMemory> {
    match config.bootstrap {
        Bootstrap::Full => recompute_full(manifest, &encode(theta_m, features)?),
        Bootstrap::Subset => {
            let flat = select_epoch_subset(manifest, config.k_per_pid, rng).flatten();
            let rows: Vec<usize> = flat.iter().map(|(s, _)| manifest.row_of(*s).unwrap()).collect();
            let labels: Vec<Pid> = flat.iter().map(|(_, p)| *p).collect();
            initialize_centroids(&encode(theta_m, &features.gather(&rows))?, &labels)
        }
    }
}

fn to_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&v| v as f64).collect()
}

/// Loss and parameter gradient of one mini-batch under `theta_e`.
/// Centroid targets come from `multi` for multi-camera pids and `memory`
/// for single-camera pids. `rng` draws the augmentation noise.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient(
    theta_e: &EncoderParams,
    manifest: &DatasetManifest,
    features: &EmbeddingMatrix,
    plan: &MiniBatchPlan,
    multi: &CentroidsMemory,
    memory: &CentroidsMemory,
    config: &PipelineConfig,
    rng: &mut StageRng,
) -> Result<(LossBreakdown, EncoderParams)> {
    let tau = config.temperature;
    let mut x: Rows = Vec::with_capacity(plan.sample_ids.len());
    for &id in &plan.sample_ids {
        let row = manifest.row_of(id).ok_or_else(|| Error::ShapeMismatch(format!("sample {id} not in manifest")))?;
        x.push(to_f64(features.row(row)));
    }
    let noise = Normal::new(0.0, config.aug_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let x_aug: Rows = x.iter().map(|r| r.iter().map(|v| v + noise.sample(rng)).collect()).collect();
    let pids: Vec<Pid> = plan.provenance.iter().map(|p| p.pid).collect();

    let e = theta_e.encode_f64(&x)?;
    let e_aug = theta_e.encode_f64(&x_aug)?;

    let ins = instance_loss(&e, &pids, tau)?;
    let aug = augmentation_loss(&e, &e_aug, &pids, tau)?;

    let mut targets: BTreeMap<Pid, Vec<f64>> = BTreeMap::new();
    for p in &plan.provenance {
        let c = match p.source {
            Source::MultiCamera => multi.get(p.pid),
            Source::SingleCamera => memory.get(p.pid),
        }
        .ok_or(Error::MissingCentroid(p.pid))?;
        targets.entry(p.pid).or_insert_with(|| to_f64(c));
    }
    let cen = centroids_loss(&e, &pids, &targets, tau)?;

    let multi_rows: Vec<usize> = (0..pids.len())
        .filter(|&i| plan.provenance[i].source == Source::MultiCamera)
        .collect();
    let cc = if multi_rows.is_empty() {
        LossGrad { value: 0.0, grad: Vec::new() }
    } else {
        let sub: Rows = multi_rows.iter().map(|&i| e[i].clone()).collect();
        let sub_pids: Vec<Pid> = multi_rows.iter().map(|&i| pids[i]).collect();
        let cams: Vec<u32> = multi_rows.iter().map(|&i| plan.provenance[i].context_id).collect();
        camera_centroids_loss(&sub, &sub_pids, &cams, tau)?
    };

    let w = &config.loss_weights;
    let breakdown = total_loss(ins.value, aug.value, cen.value, cc.value, w);

    let d_out = theta_e.d_out();
    let d_in = theta_e.d_in();
    let mut g_e: Rows = (0..e.len())
        .map(|i| {
            (0..d_out)
                .map(|k| w.w_ins * ins.grad[i][k] + w.w_aug * aug.grad[i][k] + w.w_cen * cen.grad[i][k])
                .collect()
        })
        .collect();
    for (slot, &i) in multi_rows.iter().enumerate() {
        for k in 0..d_out {
            g_e[i][k] += w.w_cc * cc.grad[slot][k];
        }
    }
    let mut gw = vec![0.0; d_out * d_in];
    let mut gb = vec![0.0; d_out];
    let mut accumulate = |xi: &[f64], gi: &[f64], scale: f64| {
        for k in 0..d_out {
            let g = scale * gi[k];
            gb[k] += g;
            for (r, &v) in gw[k * d_in..(k + 1) * d_in].iter_mut().zip(xi) {
                *r += g * v;
            }
        }
    };
    for (xi, gi) in x.iter().zip(&g_e) {
        accumulate(xi, gi, 1.0);
    }
    for (xi, gi) in x_aug.iter().zip(&aug.grad_aug) {
        accumulate(xi, gi, w.w_aug);
    }
    Ok((breakdown, EncoderParams::new(d_in, d_out, gw, gb)?))
}

fn multicam_targets(manifest: &DatasetManifest, features: &EmbeddingMatrix, theta_m: &EncoderParams) -> Result<CentroidsMemory> {
    multicam_memory(manifest, &encode(theta_m, features)?, None)
}

/// Runs the full loop for `config.epochs` epochs. Deterministic for a given
/// seed.
pub fn run_training(manifest: &DatasetManifest, features: &EmbeddingMatrix, config: &PipelineConfig) -> Result<TrainingOutcome> {
    run_training_with(manifest, features, config, |_, _| {})
}

/// [`run_training`] with a callback after every epoch.
pub fn run_training_with(
    manifest: &DatasetManifest,
    features: &EmbeddingMatrix,
    config: &PipelineConfig,
    mut on_epoch: impl FnMut(&RefinementReport, &[LossRecord]),
) -> Result<TrainingOutcome> {
    config.validate()?;
    if features.rows() != manifest.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} records",
            features.rows(),
            manifest.len()
        )));
    }
    let mut train_rng = stage_rng(config.seed, Stage::Train);
    let mut relabel_rng = stage_rng(config.seed, Stage::Relabel);
    let mut sampler_rng = stage_rng(config.seed, Stage::Sampler);

    let d_out = if config.embed_dim == 0 { features.dim() } else { config.embed_dim };
    let initial = EncoderParams::random(features.dim(), d_out, &mut train_rng);
    let mut theta_e = initial.clone();
    let mut theta_m = initial.clone();
    let mut manifest = manifest.clone();
    let mut memory = bootstrap_memory(&manifest, features, &theta_m, config, &mut relabel_rng)?;
    let mut queue = ExclusionQueue::new(0);
    let mut reports = Vec::with_capacity(config.epochs);
    let mut curve = Vec::new();

    for epoch in 0..config.epochs {
        let out = run_relabeling_epoch(
            &manifest,
            features,
            |x| encode(&theta_m, x),
            &memory,
            config,
            &mut relabel_rng,
        )?;
        manifest = out.manifest;
        memory = out.memory;

        let pools = ImagePools::from_manifest(&manifest, &out.removed);
        let available: BTreeSet<Pid> = pools.single_pids().into_iter().filter(|&p| memory.contains(p)).collect();
        queue.remap(&out.mapping);
        queue.set_capacity(queue_capacity(
            config.queue_epochs,
            config.iterations_per_epoch,
            config.n_p,
            available.len(),
        ));

        let mut multi = multicam_targets(&manifest, features, &theta_m)?;
        let epoch_start = curve.len();
        for iteration in 0..config.iterations_per_epoch {
            if config.fresh_centroids && iteration > 0 {
                multi = multicam_targets(&manifest, features, &theta_m)?;
            }
            let step = next_pairs(
                &multi,
                &memory,
                &mut queue,
                config.strategy,
                config.n_p,
                Some(&available),
                &mut sampler_rng,
            )?;
            let plan = compose_minibatch(&step.pairs, &pools, config.n_k, &mut sampler_rng)?;
            let (loss, grad) = batch_gradient(&theta_e, &manifest, features, &plan, &multi, &memory, config, &mut train_rng)?;
            let lr = config.learning_rate;
            for (p, g) in theta_e.weights_mut().iter_mut().zip(grad.weights()) {
                *p -= lr * g;
            }
            for (p, g) in theta_e.bias_mut().iter_mut().zip(grad.bias()) {
                *p -= lr * g;
            }
            if config.momentum_per_iteration {
                theta_m = momentum_update(&theta_m, &theta_e, config.lambda_momentum)?;
            }
            curve.push(LossRecord { epoch, iteration, loss });
        }
        if !config.momentum_per_iteration && config.iterations_per_epoch > 0 {
            theta_m = momentum_update(&theta_m, &theta_e, config.lambda_momentum)?;
        }
        log::info!(
            "epoch {epoch}: removed {} relabeled {} pids {} -> {}",
            out.report.n_removed,
            out.report.n_relabeled,
            out.report.pids_before,
            out.report.pids_after
        );
        on_epoch(&out.report, &curve[epoch_start..]);
        reports.push(out.report);
    }
    Ok(TrainingOutcome {
        initial,
        encoder: theta_e,
        momentum: theta_m,
        reports,
        curve,
        manifest,
        memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn small() -> (DatasetManifest, EmbeddingMatrix, PipelineConfig) {
        let spec = SynthSpec {
            num_multicam_pids: 10,
            num_singlecam_pids: 20,
            images_per_pid: 6,
            dim_raw: 16,
            seed: 3,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        let config = PipelineConfig {
            n_p: 4,
            n_k: 2,
            epochs: 2,
            iterations_per_epoch: 3,
            queue_epochs: 1,
            ..PipelineConfig::default()
        };
        (data.manifest, data.features, config)
    }

    #[test]
    fn zero_iterations_leave_encoders_untouched() {
        let (m, f, mut c) = small();
        c.iterations_per_epoch = 0;
        let out = run_training(&m, &f, &c).unwrap();
        assert_eq!(out.encoder, out.initial);
        assert_eq!(out.momentum, out.initial);
        assert!(out.curve.is_empty());
        assert_eq!(out.reports.len(), 2);
    }

    #[test]
    fn lambda_zero_tracks_encoder() {
        let (m, f, mut c) = small();
        c.lambda_momentum = 0.0;
        let out = run_training(&m, &f, &c).unwrap();
        assert_eq!(out.momentum, out.encoder);
        assert_ne!(out.encoder, out.initial);
    }

    #[test]
    fn training_is_deterministic() {
        let (m, f, c) = small();
        let a = run_training(&m, &f, &c).unwrap();
        let b = run_training(&m, &f, &c).unwrap();
        assert_eq!(format_loss_curve(&a.curve), format_loss_curve(&b.curve));
        assert_eq!(a.momentum, b.momentum);
        assert_eq!(initial_encoder(16, &c), a.initial);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let (m, f, c) = small();
        let theta = initial_encoder(16, &c);
        let mut rng = stage_rng(1, Stage::Sampler);
        let multi = multicam_targets(&m, &f, &theta).unwrap();
        let memory = recompute_full(&m, &encode(&theta, &f).unwrap()).unwrap();
        let mut queue = ExclusionQueue::new(0);
        let step = next_pairs(&multi, &memory, &mut queue, c.strategy, 4, None, &mut rng).unwrap();
        let pools = ImagePools::from_manifest(&m, &BTreeSet::new());
        let plan = compose_minibatch(&step.pairs, &pools, 2, &mut rng).unwrap();
        let loss_at = |p: &EncoderParams| {
            let mut r = stage_rng(9, Stage::Train);
            batch_gradient(p, &m, &f, &plan, &multi, &memory, &c, &mut r).unwrap()
        };
        let (_, grad) = loss_at(&theta);
        let h = 1e-5;
        for idx in [0usize, 17, 100, 255] {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up.weights_mut()[idx] += h;
            down.weights_mut()[idx] -= h;
            let fd = (loss_at(&up).0.total - loss_at(&down).0.total) / (2.0 * h);
            let g = grad.weights()[idx];
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "{fd} vs {g}");
        }
        let mut up = theta.clone();
        let mut down = theta.clone();
        up.bias_mut()[3] += h;
        down.bias_mut()[3] -= h;
        let fd = (loss_at(&up).0.total - loss_at(&down).0.total) / (2.0 * h);
        assert!((fd - grad.bias()[3]).abs() <= 1e-4 * grad.bias()[3].abs().max(1e-3));
    }
}
