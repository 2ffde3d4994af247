//! Mixed mini-batch sampling.
//!
//! Each iteration draws N_P multi-camera pids, scores them against every
//! single-camera centroid not held in the exclusion queue, pairs them one to
//! one with the Hungarian solver under a strategy-specific cost, and then
//! draws N_K images per paired pid.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::assign::{hungarian_assign, CostMatrix};
use crate::centroids::{initialize_centroids, CentroidsMemory};
use crate::error::{Error, Result};
use crate::rng::StageRng;
use crate::similarity::{pairwise_similarity, SimilarityMatrix};
use crate::types::{DatasetManifest, EmbeddingMatrix, Pid, SampleId, Source, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairingStrategy {
    Random,
    /// Most similar pairs.
    Hard,
    /// Least similar pairs.
    Soft,
    /// Pairs closest to the mean similarity.
    Mean,
    /// Pairs closest to the median similarity.
    #[default]
    Median,
}

impl PairingStrategy {
    pub const ALL: [PairingStrategy; 5] = [
        PairingStrategy::Random,
        PairingStrategy::Hard,
        PairingStrategy::Soft,
        PairingStrategy::Mean,
        PairingStrategy::Median,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PairingStrategy::Random => "random",
            PairingStrategy::Hard => "hard",
            PairingStrategy::Soft => "soft",
            PairingStrategy::Mean => "mean",
            PairingStrategy::Median => "median",
        }
    }
}

impl FromStr for PairingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PairingStrategy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy `{s}`")))
    }
}

/// Median of a multiset; even counts give the midpoint of the two central values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cost whose minimum-weight matching realizes the strategy.
pub fn strategy_cost(s: &SimilarityMatrix, strategy: PairingStrategy, rng: &mut StageRng) -> Result<CostMatrix> {
    if s.cols() < s.rows() {
        return Err(Error::NotEnoughCandidates {
            needed: s.rows(),
            available: s.cols(),
        });
    }
    let vals = s.values();
    let data: Vec<f64> = match strategy {
        PairingStrategy::Hard => vals.iter().map(|x| -x).collect(),
        PairingStrategy::Soft => vals.to_vec(),
        PairingStrategy::Mean => {
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            vals.iter().map(|x| (x - mean).abs()).collect()
        }
        PairingStrategy::Median => {
            let med = median(vals);
            vals.iter().map(|x| (x - med).abs()).collect()
        }
        PairingStrategy::Random => (0..vals.len()).map(|_| rng.random::<f64>()).collect(),
    };
    CostMatrix::new(s.rows(), s.cols(), data)
}

/// FIFO of recently paired single-camera pids, barred from the next pairings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExclusionQueue {
    capacity: usize,
    entries: VecDeque<Pid>,
}

/// `min(epochs * iterations * n_p, live - n_p)`, floored at zero.
pub fn queue_capacity(queue_epochs: usize, iterations_per_epoch: usize, n_p: usize, live_single_pids: usize) -> usize {
    queue_epochs
        .saturating_mul(iterations_per_epoch)
        .saturating_mul(n_p)
        .min(live_single_pids.saturating_sub(n_p))
}

impl ExclusionQueue {
    pub fn new(capacity: usize) -> Self {
        ExclusionQueue {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, pid: Pid) -> bool {
        self.entries.contains(&pid)
    }

    pub fn iter(&self) -> impl Iterator<Item = Pid> + '_ {
        self.entries.iter().copied()
    }

    pub fn push(&mut self, pid: Pid) {
        self.entries.push_back(pid);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Shrinks or grows the window; shrinking evicts oldest entries first.
    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity;
        while self.entries.len() > capacity {
            self.entries.pop_front();
        }
    }

    /// Rewrites entries after a pid merge, keeping only the newest copy of
    /// pids that collapse together.
    pub fn remap(&mut self, mapping: &BTreeMap<Pid, Pid>) {
        let mut seen = BTreeSet::new();
        let mut kept: Vec<Pid> = Vec::with_capacity(self.entries.len());
        for &p in self.entries.iter().rev() {
            let q = mapping.get(&p).copied().unwrap_or(p);
            if seen.insert(q) {
                kept.push(q);
            }
        }
        kept.reverse();
        self.entries = kept.into();
    }
}

/// Centroid of each selected pid over all of its multi-camera training rows.
/// `embeddings` rows follow `manifest` order.
pub fn compute_multicam_centroids(
    selected: &[Pid],
    manifest: &DatasetManifest,
    embeddings: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    let memory = multicam_memory(manifest, embeddings, Some(selected))?;
    memory.matrix_of(selected).map_err(|e| match e {
        Error::MissingCentroid(p) => Error::EmptyGroup(p),
        other => other,
    })
}

/// Multi-camera centroids for every training pid (or only `only`).
pub fn multicam_memory(
    manifest: &DatasetManifest,
    embeddings: &EmbeddingMatrix,
    only: Option<&[Pid]>,
) -> Result<CentroidsMemory> {
    if embeddings.rows() != manifest.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding rows for {} records",
            embeddings.rows(),
            manifest.len()
        )));
    }
    let wanted: Option<BTreeSet<Pid>> = only.map(|s| s.iter().copied().collect());
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, r) in manifest.records().iter().enumerate() {
        if r.source == Source::MultiCamera
            && r.split == Split::Train
            && wanted.as_ref().is_none_or(|w| w.contains(&r.pid))
        {
            rows.push(i);
            labels.push(r.pid);
        }
    }
    initialize_centroids(&embeddings.gather(&rows), &labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub multi_pid: Pid,
    pub single_pid: Pid,
    pub similarity: f64,
}

/// Everything `next_pairs` looked at, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct PairingStep {
    pub pairs: Vec<Pair>,
    pub similarity: SimilarityMatrix,
    pub candidates: Vec<Pid>,
}

/// One pairing step. `multi` holds the multi-camera centroids, `memory` the
/// single-camera ones. `available`, when given, restricts single pids to
/// those that still have usable images.
pub fn next_pairs(
    multi: &CentroidsMemory,
    memory: &CentroidsMemory,
    queue: &mut ExclusionQueue,
    strategy: PairingStrategy,
    n_p: usize,
    available: Option<&BTreeSet<Pid>>,
    rng: &mut StageRng,
) -> Result<PairingStep> {
    let multi_pids: Vec<Pid> = multi.pids().collect();
    if multi_pids.len() < n_p {
        return Err(Error::NotEnoughCandidates {
            needed: n_p,
            available: multi_pids.len(),
        });
    }
    let candidates: Vec<Pid> = memory
        .pids()
        .filter(|&p| !queue.contains(p) && available.is_none_or(|a| a.contains(&p)))
        .collect();
    if candidates.len() < n_p {
        return Err(Error::NotEnoughCandidates {
            needed: n_p,
            available: candidates.len(),
        });
    }
    let mut picked: Vec<Pid> = index::sample(rng, multi_pids.len(), n_p)
        .into_iter()
        .map(|i| multi_pids[i])
        .collect();
    picked.sort_unstable();
    let s = pairwise_similarity(&multi.matrix_of(&picked)?, &memory.matrix_of(&candidates)?)?;
    let cost = strategy_cost(&s, strategy, rng)?;
    let assignment = hungarian_assign(&cost)?;
    let pairs: Vec<Pair> = assignment
        .columns
        .iter()
        .enumerate()
        .map(|(i, &j)| Pair {
            multi_pid: picked[i],
            single_pid: candidates[j],
            similarity: s.get(i, j),
        })
        .collect();
    for p in &pairs {
        queue.push(p.single_pid);
    }
    Ok(PairingStep {
        pairs,
        similarity: s,
        candidates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub pid: Pid,
    pub source: Source,
    pub context_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatchPlan {
    pub pairs: Vec<Pair>,
    /// Per pair: N_K multi-camera ids then N_K single-camera ids.
    pub sample_ids: Vec<SampleId>,
    pub provenance: Vec<Provenance>,
}

impl MiniBatchPlan {
    /// Every broken shape rule, as text. Empty means the plan is well formed.
    /// `cameras_available` gives the number of cameras each multi pid has.
    pub fn violations(&self, n_p: usize, n_k: usize, cameras_available: &BTreeMap<Pid, usize>) -> Vec<String> {
        let mut out = Vec::new();
        if self.sample_ids.len() != 2 * n_p * n_k {
            out.push(format!("{} samples, expected {}", self.sample_ids.len(), 2 * n_p * n_k));
        }
        if self.provenance.len() != self.sample_ids.len() {
            out.push("provenance length differs from sample ids".into());
        }
        let multi: BTreeSet<Pid> = self.pairs.iter().map(|p| p.multi_pid).collect();
        let single: BTreeSet<Pid> = self.pairs.iter().map(|p| p.single_pid).collect();
        if multi.len() != n_p || single.len() != n_p || self.pairs.len() != n_p {
            out.push(format!("{} multi / {} single distinct pids, expected {n_p}", multi.len(), single.len()));
        }
        let mut per_slot: BTreeMap<(Pid, Source), Vec<u32>> = BTreeMap::new();
        for p in &self.provenance {
            per_slot.entry((p.pid, p.source)).or_default().push(p.context_id);
        }
        for ((pid, source), ctx) in &per_slot {
            if ctx.len() != n_k {
                out.push(format!("pid {pid} has {} images, expected {n_k}", ctx.len()));
            }
            if *source == Source::MultiCamera {
                let distinct = ctx.iter().collect::<BTreeSet<_>>().len();
                let want = n_k.min(cameras_available.get(pid).copied().unwrap_or(0));
                if distinct != want {
                    out.push(format!("pid {pid} spans {distinct} cameras, expected {want}"));
                }
            }
        }
        out
    }

    /// `batch_index \t multi:single:sim,... \t id \t id ...`
    pub fn to_line(&self, batch_index: usize) -> String {
        let pairs: Vec<String> = self
            .pairs
            .iter()
            .map(|p| format!("{}:{}:{:.6}", p.multi_pid, p.single_pid, p.similarity))
            .collect();
        let mut line = format!("{batch_index}\t{}", pairs.join(","));
        for id in &self.sample_ids {
            let _ = write!(line, "\t{id}");
        }
        line
    }
}

/// Image pools used by [`compose_minibatch`].
#[derive(Debug, Clone, Default)]
pub struct ImagePools {
    /// Multi-camera pid -> camera -> sample ids.
    pub multi: BTreeMap<Pid, BTreeMap<u32, Vec<SampleId>>>,
    /// Single-camera pid -> (video, sample ids).
    pub single: BTreeMap<Pid, (u32, Vec<SampleId>)>,
}

impl ImagePools {
    /// Training images of `manifest`, leaving out `excluded` sample ids.
    pub fn from_manifest(manifest: &DatasetManifest, excluded: &BTreeSet<SampleId>) -> Self {
        let mut pools = ImagePools::default();
        for r in manifest.records() {
            if r.split != Split::Train || excluded.contains(&r.sample_id) {
                continue;
            }
            match r.source {
                Source::MultiCamera => pools
                    .multi
                    .entry(r.pid)
                    .or_default()
                    .entry(r.context_id)
                    .or_default()
                    .push(r.sample_id),
                Source::SingleCamera => pools
                    .single
                    .entry(r.pid)
                    .or_insert_with(|| (r.context_id, Vec::new()))
                    .1
                    .push(r.sample_id),
            }
        }
        pools
    }

    pub fn single_pids(&self) -> BTreeSet<Pid> {
        self.single.keys().copied().collect()
    }

    pub fn cameras_per_multi_pid(&self) -> BTreeMap<Pid, usize> {
        self.multi.iter().map(|(&p, c)| (p, c.len())).collect()
    }
}

fn draw_camera_diverse(cams: &BTreeMap<u32, Vec<SampleId>>, n_k: usize, rng: &mut StageRng) -> Vec<(SampleId, u32)> {
    let mut order: Vec<(u32, Vec<SampleId>)> = cams.iter().map(|(&c, ids)| (c, ids.clone())).collect();
    order.shuffle(rng);
    for (_, ids) in order.iter_mut() {
        ids.shuffle(rng);
    }
    let deepest = order.iter().map(|(_, ids)| ids.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(n_k);
    // Round r takes the r-th image of each camera; exhausting every image
    // starts over, which is the only case where an image repeats.
    'outer: loop {
        for round in 0..deepest {
            for (cam, ids) in &order {
                if let Some(&id) = ids.get(round) {
                    out.push((id, *cam));
                    if out.len() == n_k {
                        break 'outer;
                    }
                }
            }
        }
    }
    out
}

/// Draws N_K images for each side of every pair. Multi-camera images are
/// taken one per camera in shuffled camera order; single-camera images are
/// drawn uniformly, with replacement only when fewer than N_K exist.
pub fn compose_minibatch(pairs: &[Pair], pools: &ImagePools, n_k: usize, rng: &mut StageRng) -> Result<MiniBatchPlan> {
    let mut sample_ids = Vec::with_capacity(2 * pairs.len() * n_k);
    let mut provenance = Vec::with_capacity(2 * pairs.len() * n_k);
    for pair in pairs {
        let cams = pools
            .multi
            .get(&pair.multi_pid)
            .filter(|c| c.values().any(|v| !v.is_empty()))
            .ok_or(Error::EmptyGroup(pair.multi_pid))?;
        for (id, cam) in draw_camera_diverse(cams, n_k, rng) {
            sample_ids.push(id);
            provenance.push(Provenance {
                pid: pair.multi_pid,
                source: Source::MultiCamera,
                context_id: cam,
            });
        }
        let (video, ids) = pools
            .single
            .get(&pair.single_pid)
            .filter(|(_, ids)| !ids.is_empty())
            .ok_or(Error::EmptyGroup(pair.single_pid))?;
        let picks: Vec<SampleId> = if ids.len() >= n_k {
            index::sample(rng, ids.len(), n_k).into_iter().map(|i| ids[i]).collect()
        } else {
            (0..n_k).map(|_| ids[rng.random_range(0..ids.len())]).collect()
        };
        for id in picks {
            sample_ids.push(id);
            provenance.push(Provenance {
                pid: pair.single_pid,
                source: Source::SingleCamera,
                context_id: *video,
            });
        }
    }
    Ok(MiniBatchPlan {
        pairs: pairs.to_vec(),
        sample_ids,
        provenance,
    })
}
