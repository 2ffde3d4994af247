//! Synthetic identity clusters with injected pseudo-label noise.
//!
//! Every identity gets a unit anchor; its images are the anchor plus
//! Gaussian noise, renormalized. Single-camera pseudo-labels are then
//! corrupted in three ways: identities split into fragments with fresh
//! pids, images whose stored pid points at another person from the same
//! video, and junk images far from every anchor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::parse_key_values;
use crate::rng::{stage_rng, Stage, StageRng};
use crate::similarity::dot;
use crate::types::{DatasetManifest, EmbeddingMatrix, Pid, SampleId, SampleRecord, Source, Split};

const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_multicam_pids: usize,
    pub num_singlecam_pids: usize,
    pub images_per_pid: usize,
    pub num_cameras: usize,
    pub dim_raw: usize,
    /// Per-coordinate standard deviation of within-identity noise.
    pub intra_noise_sigma: f64,
    /// Upper bound on the cosine between any two anchors.
    pub min_inter_angle_cos: f64,
    pub frag_rate: f64,
    pub frag_parts: usize,
    pub mislabel_rate: f64,
    pub junk_rate: f64,
    pub seed: u64,
    /// Identities sharing one single-camera video.
    pub pids_per_video: usize,
    /// Held-out multi-camera identities for the query/gallery splits.
    pub num_eval_pids: usize,
    pub eval_images_per_pid: usize,
    /// Norm of each camera's bias vector; must not exceed `intra_noise_sigma`.
    pub camera_bias_norm: f64,
    /// Junk images have cosine below this to every anchor.
    pub junk_max_cos: f64,
    /// Anchors span the first `identity_dim` coordinates; 0 means all of them.
    pub identity_dim: usize,
    /// Per-coordinate noise on the remaining coordinates.
    pub nuisance_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_multicam_pids: 32,
            num_singlecam_pids: 64,
            images_per_pid: 12,
            num_cameras: 4,
            dim_raw: 64,
            intra_noise_sigma: 0.04,
            min_inter_angle_cos: 0.3,
            frag_rate: 0.0,
            frag_parts: 3,
            mislabel_rate: 0.0,
            junk_rate: 0.0,
            seed: 0,
            pids_per_video: 4,
            num_eval_pids: 0,
            eval_images_per_pid: 6,
            camera_bias_norm: 0.04,
            junk_max_cos: 0.45,
            identity_dim: 0,
            nuisance_sigma: 0.0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, r) in [
            ("frag_rate", self.frag_rate),
            ("mislabel_rate", self.mislabel_rate),
            ("junk_rate", self.junk_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.frag_parts < 2 {
            return bad("frag_parts must be at least 2".into());
        }
        if self.num_cameras < 2 {
            return bad("num_cameras must be at least 2".into());
        }
        if self.dim_raw == 0 || self.images_per_pid == 0 || self.pids_per_video == 0 {
            return bad("dim_raw, images_per_pid and pids_per_video must be positive".into());
        }
        if self.identity_dim > self.dim_raw {
            return bad("identity_dim cannot exceed dim_raw".into());
        }
        if self.num_eval_pids > 0 && self.eval_images_per_pid < 2 {
            return bad("eval identities need at least 2 images".into());
        }
        if !(self.camera_bias_norm >= 0.0 && self.camera_bias_norm <= self.intra_noise_sigma) {
            return bad("camera_bias_norm must lie in [0, intra_noise_sigma]".into());
        }
        if !(self.intra_noise_sigma >= 0.0 && self.nuisance_sigma >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.frag_rate > 0.0 && self.images_per_pid < self.frag_parts {
            return bad("images_per_pid must be at least frag_parts to fragment".into());
        }
        if self.mislabel_rate > 0.0 && self.pids_per_video < 2 {
            return bad("mislabeling needs at least 2 pids per video".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_multicam_pids" => self.num_multicam_pids = parse_value(key, value)?,
            "num_singlecam_pids" => self.num_singlecam_pids = parse_value(key, value)?,
            "images_per_pid" => self.images_per_pid = parse_value(key, value)?,
            "num_cameras" => self.num_cameras = parse_value(key, value)?,
            "dim_raw" => self.dim_raw = parse_value(key, value)?,
            "intra_noise_sigma" => self.intra_noise_sigma = parse_value(key, value)?,
            "min_inter_angle_cos" => self.min_inter_angle_cos = parse_value(key, value)?,
            "frag_rate" => self.frag_rate = parse_value(key, value)?,
            "frag_parts" => self.frag_parts = parse_value(key, value)?,
            "mislabel_rate" => self.mislabel_rate = parse_value(key, value)?,
            "junk_rate" => self.junk_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "pids_per_video" => self.pids_per_video = parse_value(key, value)?,
            "num_eval_pids" => self.num_eval_pids = parse_value(key, value)?,
            "eval_images_per_pid" => self.eval_images_per_pid = parse_value(key, value)?,
            "camera_bias_norm" => self.camera_bias_norm = parse_value(key, value)?,
            "junk_max_cos" => self.junk_max_cos = parse_value(key, value)?,
            "identity_dim" => self.identity_dim = parse_value(key, value)?,
            "nuisance_sigma" => self.nuisance_sigma = parse_value(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (line, k, v) in parse_key_values(text, origin)? {
            spec.set(&k, &v).map_err(|e| match e {
                Error::InvalidConfig(message) => Error::Parse {
                    path: origin.to_string(),
                    line,
                    message,
                },
                other => other,
            })?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("num_multicam_pids", self.num_multicam_pids.to_string());
        kv("num_singlecam_pids", self.num_singlecam_pids.to_string());
        kv("images_per_pid", self.images_per_pid.to_string());
        kv("num_cameras", self.num_cameras.to_string());
        kv("dim_raw", self.dim_raw.to_string());
        kv("intra_noise_sigma", self.intra_noise_sigma.to_string());
        kv("min_inter_angle_cos", self.min_inter_angle_cos.to_string());
        kv("frag_rate", self.frag_rate.to_string());
        kv("frag_parts", self.frag_parts.to_string());
        kv("mislabel_rate", self.mislabel_rate.to_string());
        kv("junk_rate", self.junk_rate.to_string());
        kv("seed", self.seed.to_string());
        kv("pids_per_video", self.pids_per_video.to_string());
        kv("num_eval_pids", self.num_eval_pids.to_string());
        kv("eval_images_per_pid", self.eval_images_per_pid.to_string());
        kv("camera_bias_norm", self.camera_bias_norm.to_string());
        kv("junk_max_cos", self.junk_max_cos.to_string());
        kv("identity_dim", self.identity_dim.to_string());
        kv("nuisance_sigma", self.nuisance_sigma.to_string());
        s
    }

    fn effective_identity_dim(&self) -> usize {
        if self.identity_dim == 0 {
            self.dim_raw
        } else {
            self.identity_dim
        }
    }
}

/// What the generator knows and the pipeline must rediscover.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `None` marks a junk image.
    pub true_pid: BTreeMap<SampleId, Option<Pid>>,
    /// Injected fragment pid -> the identity it was split from.
    pub fragment_map: BTreeMap<Pid, Pid>,
    /// Samples whose stored pid is not their true pid.
    pub mislabel_set: BTreeSet<SampleId>,
}

impl GroundTruth {
    pub fn junk_ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.true_pid
            .iter()
            .filter(|(_, p)| p.is_none())
            .map(|(&s, _)| s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("sample_id\ttrue_pid\n");
        for (s, p) in &self.true_pid {
            match p {
                Some(p) => {
                    let _ = writeln!(out, "{s}\t{p}");
                }
                None => {
                    let _ = writeln!(out, "{s}\tjunk");
                }
            }
        }
        out
    }

    /// Reads the `sample_id  true_pid` sidecar. Fragment and mislabel sets
    /// are rebuilt against the stored labels in `manifest`.
    pub fn parse(text: &str, origin: &str, manifest: &DatasetManifest) -> Result<Self> {
        let perr = |line: usize, message: &str| Error::Parse {
            path: origin.to_string(),
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.split('\t').map(str::trim).eq(["sample_id", "true_pid"]) => {}
            _ => return Err(perr(1, "expected header `sample_id\ttrue_pid`")),
        }
        let mut true_pid = BTreeMap::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| perr(idx + 1, "expected two columns"))?;
            let s: SampleId = a.trim().parse().map_err(|_| perr(idx + 1, "bad sample_id"))?;
            let p = match b.trim() {
                "junk" => None,
                v => Some(v.parse().map_err(|_| perr(idx + 1, "bad true_pid"))?),
            };
            true_pid.insert(s, p);
        }
        let mut fragment_map = BTreeMap::new();
        let mut mislabel_set = BTreeSet::new();
        let mut members: BTreeMap<Pid, Vec<Option<Pid>>> = BTreeMap::new();
        for r in manifest.records() {
            let t = true_pid.get(&r.sample_id).copied().flatten();
            members.entry(r.pid).or_default().push(t);
        }
        for r in manifest.records() {
            if let Some(Some(t)) = true_pid.get(&r.sample_id) {
                if *t != r.pid {
                    // The majority true identity of a pid that does not exist
                    // as a true pid marks it as an injected fragment.
                    let majority = majority(&members[&r.pid]);
                    if majority == Some(*t) && !true_pid.values().any(|v| *v == Some(r.pid)) {
                        fragment_map.insert(r.pid, *t);
                    } else {
                        mislabel_set.insert(r.sample_id);
                    }
                }
            }
        }
        Ok(GroundTruth {
            true_pid,
            fragment_map,
            mislabel_set,
        })
    }
}

fn majority(v: &[Option<Pid>]) -> Option<Pid> {
    let mut counts: BTreeMap<Pid, usize> = BTreeMap::new();
    for p in v.iter().flatten() {
        *counts.entry(*p).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(p, _)| p)
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// Raw features, row order = manifest order.
    pub features: EmbeddingMatrix,
    pub truth: GroundTruth,
    /// Unit anchor of every true identity.
    pub anchors: BTreeMap<Pid, Vec<f32>>,
}

fn gaussian(rng: &mut StageRng, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * sigma
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn random_unit(rng: &mut StageRng, dim: usize, active: usize) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; dim];
        for x in v.iter_mut().take(active) {
            *x = rng.sample(StandardNormal);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

fn cos64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: StageRng,
    id_dim: usize,
}

impl Generator<'_> {
    fn anchors(&mut self, count: usize) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
        while out.len() < count {
            let mut failures = 0;
            loop {
                let cand = random_unit(&mut self.rng, self.spec.dim_raw, self.id_dim);
                if out
                    .iter()
                    .all(|a| cos64(a, &cand) <= self.spec.min_inter_angle_cos)
                {
                    out.push(cand);
                    break;
                }
                failures += 1;
                if failures >= MAX_REJECTIONS {
                    return Err(Error::InfeasibleSpec(format!(
                        "could not place anchor {} of {} with cosine <= {}",
                        out.len() + 1,
                        count,
                        self.spec.min_inter_angle_cos
                    )));
                }
            }
        }
        Ok(out)
    }

    fn image(&mut self, anchor: &[f64], bias: Option<&[f64]>) -> Vec<f32> {
        let mut v: Vec<f64> = anchor.to_vec();
        for (k, x) in v.iter_mut().enumerate() {
            let sigma = if k < self.id_dim {
                self.spec.intra_noise_sigma
            } else {
                self.spec.nuisance_sigma
            };
            *x += gaussian(&mut self.rng, sigma);
        }
        if let Some(b) = bias {
            v.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        normalize(&mut v);
        v.into_iter().map(|x| x as f32).collect()
    }
}

fn rate_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).min(n)
}

/// Builds a dataset from `spec`. The same spec always gives the same output.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut g = Generator {
        spec,
        rng: stage_rng(spec.seed, Stage::Gen),
        id_dim: spec.effective_identity_dim(),
    };
    let n_ids = spec.num_multicam_pids + spec.num_eval_pids + spec.num_singlecam_pids;
    let anchors = g.anchors(n_ids)?;
    let biases: Vec<Vec<f64>> = (0..spec.num_cameras)
        .map(|_| {
            let mut b = random_unit(&mut g.rng, spec.dim_raw, spec.dim_raw);
            b.iter_mut().for_each(|x| *x *= spec.camera_bias_norm);
            b
        })
        .collect();

    let mut records = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut true_pid = BTreeMap::new();
    let mut anchor_map = BTreeMap::new();
    let mut next_id: SampleId = 0;
    let mut push = |records: &mut Vec<SampleRecord>,
                    rows: &mut Vec<Vec<f32>>,
                    true_pid: &mut BTreeMap<SampleId, Option<Pid>>,
                    rec: SampleRecord,
                    truth: Option<Pid>,
                    row: Vec<f32>| {
        let id = next_id;
        next_id += 1;
        records.push(SampleRecord { sample_id: id, ..rec });
        rows.push(row);
        true_pid.insert(id, truth);
        id
    };

    // Labeled multi-camera identities, then held-out evaluation identities.
    let n_multi = spec.num_multicam_pids + spec.num_eval_pids;
    for (idx, anchor) in anchors.iter().enumerate().take(n_multi) {
        let pid = idx as Pid;
        anchor_map.insert(pid, anchor.iter().map(|&x| x as f32).collect::<Vec<_>>());
        let eval = idx >= spec.num_multicam_pids;
        let count = if eval { spec.eval_images_per_pid } else { spec.images_per_pid };
        for j in 0..count {
            let cam = (j % spec.num_cameras) as u32;
            let row = g.image(anchor, Some(&biases[cam as usize]));
            let split = match (eval, j) {
                (false, _) => Split::Train,
                (true, 0) => Split::Query,
                (true, _) => Split::Gallery,
            };
            let rec = SampleRecord {
                sample_id: 0,
                pid,
                source: Source::MultiCamera,
                context_id: cam,
                split,
            };
            push(&mut records, &mut rows, &mut true_pid, rec, Some(pid), row);
        }
    }

    // Single-camera identities, several per video.
    let single_base = n_multi as Pid;
    let mut single_ids: BTreeMap<Pid, Vec<SampleId>> = BTreeMap::new();
    for k in 0..spec.num_singlecam_pids {
        let pid = single_base + k as Pid;
        let anchor = &anchors[n_multi + k];
        anchor_map.insert(pid, anchor.iter().map(|&x| x as f32).collect::<Vec<_>>());
        let video = (k / spec.pids_per_video) as u32;
        for _ in 0..spec.images_per_pid {
            let row = g.image(anchor, None);
            let rec = SampleRecord {
                sample_id: 0,
                pid,
                source: Source::SingleCamera,
                context_id: video,
                split: Split::Train,
            };
            let id = push(&mut records, &mut rows, &mut true_pid, rec, Some(pid), row);
            single_ids.entry(pid).or_default().push(id);
        }
    }
    let mut next_pid = single_base + spec.num_singlecam_pids as Pid;

    // Fragmentation: contiguous parts of an identity's images get fresh pids.
    let mut fragment_map = BTreeMap::new();
    let n_frag = rate_count(spec.frag_rate, spec.num_singlecam_pids);
    let mut chosen: Vec<usize> = index::sample(&mut g.rng, spec.num_singlecam_pids, n_frag).into_vec();
    chosen.sort_unstable();
    for k in chosen {
        let pid = single_base + k as Pid;
        let ids = single_ids[&pid].clone();
        let n = ids.len();
        for part in 1..spec.frag_parts {
            let fresh = next_pid;
            next_pid += 1;
            fragment_map.insert(fresh, pid);
            let lo = part * n / spec.frag_parts;
            let hi = (part + 1) * n / spec.frag_parts;
            for &id in &ids[lo..hi] {
                records[id as usize].pid = fresh;
            }
        }
    }

    // Mislabels: stored pid moves to another person of the same video.
    let mut mislabel_set = BTreeSet::new();
    let single_rows: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.source == Source::SingleCamera)
        .map(|(i, _)| i)
        .collect();
    let n_mis = rate_count(spec.mislabel_rate, single_rows.len());
    let mut video_pids: BTreeMap<u32, BTreeSet<Pid>> = BTreeMap::new();
    for &i in &single_rows {
        video_pids
            .entry(records[i].context_id)
            .or_default()
            .insert(records[i].pid);
    }
    let picks = index::sample(&mut g.rng, single_rows.len(), n_mis).into_vec();
    let mut picks: Vec<usize> = picks.into_iter().map(|p| single_rows[p]).collect();
    picks.sort_unstable();
    for i in picks {
        let truth = true_pid[&records[i].sample_id].expect("single images are not junk here");
        let video = records[i].context_id;
        let candidates: Vec<Pid> = video_pids[&video]
            .iter()
            .copied()
            .filter(|&p| fragment_map.get(&p).copied().unwrap_or(p) != truth)
            .collect();
        if let Some(&target) = candidates.choose(&mut g.rng) {
            records[i].pid = target;
            mislabel_set.insert(records[i].sample_id);
        }
    }

    // Junk: random directions rejected until far from every anchor.
    let n_junk = rate_count(spec.junk_rate, single_rows.len());
    let stored_single: Vec<(Pid, u32)> = {
        let mut s = BTreeMap::new();
        for &i in &single_rows {
            s.insert(records[i].pid, records[i].context_id);
        }
        s.into_iter().collect()
    };
    for _ in 0..n_junk {
        let mut failures = 0;
        let v = loop {
            let cand = random_unit(&mut g.rng, spec.dim_raw, spec.dim_raw);
            if anchors.iter().all(|a| cos64(a, &cand) < spec.junk_max_cos) {
                break cand;
            }
            failures += 1;
            if failures >= MAX_REJECTIONS {
                return Err(Error::InfeasibleSpec(
                    "could not place a junk image away from all anchors".into(),
                ));
            }
        };
        let &(pid, video) = stored_single
            .choose(&mut g.rng)
            .ok_or_else(|| Error::InfeasibleSpec("junk needs single-camera identities".into()))?;
        let rec = SampleRecord {
            sample_id: 0,
            pid,
            source: Source::SingleCamera,
            context_id: video,
            split: Split::Train,
        };
        let row = v.into_iter().map(|x| x as f32).collect();
        push(&mut records, &mut rows, &mut true_pid, rec, None, row);
    }

    let manifest = DatasetManifest::new(records)?;
    let features = EmbeddingMatrix::from_rows(spec.dim_raw, &rows)?;
    Ok(SynthDataset {
        manifest,
        features,
        truth: GroundTruth {
            true_pid,
            fragment_map,
            mislabel_set,
        },
        anchors: anchor_map,
    })
}

/// Pair-counting agreement between a predicted labeling and the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores `predicted` (sample id -> pid) against the truth by enumerating
/// every pair. Junk samples count as their own singleton truth clusters.
/// Precision (recall) is 1 by convention when there are no predicted (true)
/// same-cluster pairs.
pub fn score_partition(
    predicted: &BTreeMap<SampleId, Pid>,
    truth: &GroundTruth,
) -> Result<PartitionScore> {
    if predicted.is_empty() {
        return Err(Error::EmptyPrediction);
    }
    let mut items = Vec::with_capacity(predicted.len());
    for (&s, &p) in predicted {
        let t = truth.true_pid.get(&s).ok_or_else(|| {
            Error::ShapeMismatch(format!("sample {s} has no ground truth entry"))
        })?;
        items.push((p, *t));
    }
    let (mut tp, mut pred_pairs, mut true_pairs) = (0u64, 0u64, 0u64);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let same_pred = items[i].0 == items[j].0;
            let same_true = matches!((items[i].1, items[j].1), (Some(a), Some(b)) if a == b);
            pred_pairs += same_pred as u64;
            true_pairs += same_true as u64;
            tp += (same_pred && same_true) as u64;
        }
    }
    let precision = if pred_pairs == 0 { 1.0 } else { tp as f64 / pred_pairs as f64 };
    let recall = if true_pairs == 0 { 1.0 } else { tp as f64 / true_pairs as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PartitionScore {
        precision,
        recall,
        f1,
    })
}

/// Nearest-anchor label for a raw feature row.
pub fn nearest_anchor(anchors: &BTreeMap<Pid, Vec<f32>>, row: &[f32]) -> Option<Pid> {
    let mut best: Option<(Pid, f64)> = None;
    for (&p, a) in anchors {
        let s = dot(a, row);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((p, s));
        }
    }
    best.map(|(p, _)| p)
}
