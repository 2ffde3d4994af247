//! Per-epoch pseudo-label refinement for single-camera identities: filtering,
//! relabeling against the centroids memory, and merging of pids whose
//! centroids form a connected component above a similarity threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;

use crate::centroids::{apply_merge, ema_update, group_means, CentroidsMemory};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::rng::StageRng;
use crate::similarity::pairwise_similarity;
use crate::types::{DatasetManifest, EmbeddingMatrix, Pid, SampleId, Source, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Remove,
    Relabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleDecision {
    pub sample_id: SampleId,
    pub verdict: Verdict,
    /// Set iff the verdict is `Relabel`.
    pub new_pid: Option<Pid>,
    /// Similarity to the best-matching centroid.
    pub best_sim: f64,
}

/// K randomly chosen sample ids per single-camera pid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochSubset {
    pub per_pid: BTreeMap<Pid, Vec<SampleId>>,
}

impl EpochSubset {
    pub fn len(&self) -> usize {
        self.per_pid.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened `(sample_id, pid)` pairs in ascending pid order.
    pub fn flatten(&self) -> Vec<(SampleId, Pid)> {
        self.per_pid
            .iter()
            .flat_map(|(&p, ids)| ids.iter().map(move |&s| (s, p)))
            .collect()
    }
}

/// Draws `min(k, n)` distinct images, uniformly, for every single-camera
/// training pid. Pids are visited in ascending order so the draw sequence is
/// fixed by the rng state.
pub fn select_epoch_subset(manifest: &DatasetManifest, k_per_pid: usize, rng: &mut StageRng) -> EpochSubset {
    let groups = manifest.group_by_pid(Source::SingleCamera, Split::Train);
    let mut per_pid = BTreeMap::new();
    for (pid, ids) in groups {
        let take = k_per_pid.min(ids.len());
        let mut picked: Vec<SampleId> = index::sample(rng, ids.len(), take)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        picked.sort_unstable();
        per_pid.insert(pid, picked);
    }
    EpochSubset { per_pid }
}

/// Verdict for every row of `features` against a frozen memory snapshot.
///
/// With `s` the best similarity over all centroids and `k` its pid (ties go
/// to the smallest pid): `s < tau_remove` removes the sample; a foreign `k`
/// with `s > tau_rel` relabels it to `k`; anything else keeps it.
pub fn filter_and_relabel(
    features: &EmbeddingMatrix,
    sample_ids: &[SampleId],
    labels: &[Pid],
    memory: &CentroidsMemory,
    tau_remove: f64,
    tau_rel: f64,
) -> Result<Vec<SampleDecision>> {
    if tau_remove > tau_rel {
        return Err(Error::InvalidConfig("tau_remove exceeds tau_rel".into()));
    }
    if sample_ids.len() != features.rows() || labels.len() != features.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows, {} ids, {} labels",
            features.rows(),
            sample_ids.len(),
            labels.len()
        )));
    }
    if let Some(&missing) = labels.iter().find(|&&l| !memory.contains(l)) {
        return Err(Error::MissingCentroid(missing));
    }
    if features.rows() == 0 {
        return Ok(Vec::new());
    }
    let (pids, centroids) = memory.to_matrix();
    let sims = pairwise_similarity(features, &centroids)?;
    let decisions = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let row = sims.row(i);
            let mut best = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                // pids ascend, so strict comparison keeps the smallest on ties
                if s > row[best] {
                    best = j;
                }
            }
            let best_sim = row[best];
            let best_pid = pids[best];
            let (verdict, new_pid) = if best_sim < tau_remove {
                (Verdict::Remove, None)
            } else if best_pid != labels[i] && best_sim > tau_rel {
                (Verdict::Relabel, Some(best_pid))
            } else {
                (Verdict::Keep, None)
            };
            SampleDecision {
                sample_id: sample_ids[i],
                verdict,
                new_pid,
                best_sim,
            }
        })
        .collect();
    Ok(decisions)
}

/// Disjoint-set forest over `0..n` with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    /// Every memory pid -> smallest pid of its component.
    pub mapping: BTreeMap<Pid, Pid>,
    pub memory: CentroidsMemory,
    /// Components with more than one member, each sorted ascending.
    pub components: Vec<Vec<Pid>>,
}

/// Links pids whose centroid similarity is at least `tau_merge` and merges
/// each connected component into its smallest pid.
pub fn merge_pids(memory: &CentroidsMemory, tau_merge: f64) -> Result<MergeOutcome> {
    let (pids, centroids) = memory.to_matrix();
    let n = pids.len();
    let mut uf = UnionFind::new(n);
    if n > 1 {
        let sims = pairwise_similarity(&centroids, &centroids)?;
        for i in 0..n {
            for j in i + 1..n {
                if sims.get(i, j) >= tau_merge {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut members: BTreeMap<usize, Vec<Pid>> = BTreeMap::new();
    for (i, &p) in pids.iter().enumerate() {
        members.entry(uf.find(i)).or_default().push(p);
    }
    let mut mapping = BTreeMap::new();
    let mut components = Vec::new();
    for group in members.into_values() {
        let canon = group[0];
        for &p in &group {
            mapping.insert(p, canon);
        }
        if group.len() > 1 {
            components.push(group);
        }
    }
    components.sort();
    let merged = apply_merge(memory, &mapping)?;
    Ok(MergeOutcome {
        mapping,
        memory: merged,
        components,
    })
}

/// Counts for one refinement epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefinementReport {
    pub epoch: u64,
    pub n_input_images: usize,
    pub n_removed: usize,
    pub n_relabeled: usize,
    pub n_kept: usize,
    pub pids_before: usize,
    pub pids_after: usize,
    pub merge_components: Vec<Vec<Pid>>,
    /// Memory pids dropped because no image carries them any more.
    pub pids_pruned: usize,
    /// Single-camera images in the manifest, all of which stay in it.
    pub n_manifest_images: usize,
    pub cross_video_pids: usize,
}

impl RefinementReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "n_input_images = {}", self.n_input_images);
        let _ = writeln!(s, "n_removed = {}", self.n_removed);
        let _ = writeln!(s, "n_relabeled = {}", self.n_relabeled);
        let _ = writeln!(s, "n_kept = {}", self.n_kept);
        let _ = writeln!(s, "pids_before = {}", self.pids_before);
        let _ = writeln!(s, "pids_after = {}", self.pids_after);
        let comps: Vec<String> = self
            .merge_components
            .iter()
            .map(|c| c.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
            .collect();
        let _ = writeln!(s, "merge_components = {}", comps.join(" "));
        let _ = writeln!(s, "pids_pruned = {}", self.pids_pruned);
        let _ = writeln!(s, "n_manifest_images = {}", self.n_manifest_images);
        let _ = writeln!(s, "cross_video_pids = {}", self.cross_video_pids);
        s
    }
}

/// Running totals over several epochs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CumulativeRefinement {
    pub epochs: usize,
    pub n_removed: usize,
    pub n_relabeled: usize,
    pub pids_initial: usize,
    pub pids_final: usize,
}

pub fn cumulative(reports: &[RefinementReport]) -> CumulativeRefinement {
    CumulativeRefinement {
        epochs: reports.len(),
        n_removed: reports.iter().map(|r| r.n_removed).sum(),
        n_relabeled: reports.iter().map(|r| r.n_relabeled).sum(),
        pids_initial: reports.first().map_or(0, |r| r.pids_before),
        pids_final: reports.last().map_or(0, |r| r.pids_after),
    }
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    /// Manifest with relabels and merges applied to every record.
    pub manifest: DatasetManifest,
    pub memory: CentroidsMemory,
    pub report: RefinementReport,
    /// Removed for this epoch only; they re-enter next epoch.
    pub removed: BTreeSet<SampleId>,
    pub subset: EpochSubset,
    pub decisions: Vec<SampleDecision>,
    pub mapping: BTreeMap<Pid, Pid>,
}

/// One refinement epoch: subset, embed, filter/relabel against the previous
/// memory, EMA update with the post-decision labels, merge, and remap.
///
/// `features` holds one row per manifest record. `embed` maps a batch of
/// those rows into the space the memory lives in (the momentum encoder).
pub fn run_relabeling_epoch<F>(
    manifest: &DatasetManifest,
    features: &EmbeddingMatrix,
    embed: F,
    memory: &CentroidsMemory,
    config: &PipelineConfig,
    rng: &mut StageRng,
) -> Result<EpochOutcome>
where
    F: Fn(&EmbeddingMatrix) -> Result<EmbeddingMatrix>,
{
    if features.rows() != manifest.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} records",
            features.rows(),
            manifest.len()
        )));
    }
    let subset = select_epoch_subset(manifest, config.k_per_pid, rng);
    let flat = subset.flatten();
    let rows: Vec<usize> = flat
        .iter()
        .map(|(s, _)| manifest.row_of(*s).expect("subset ids come from the manifest"))
        .collect();
    let sample_ids: Vec<SampleId> = flat.iter().map(|(s, _)| *s).collect();
    let labels: Vec<Pid> = flat.iter().map(|(_, p)| *p).collect();
    let embedded = embed(&features.gather(&rows))?;

    let decisions = filter_and_relabel(
        &embedded,
        &sample_ids,
        &labels,
        memory,
        config.tau_remove,
        config.tau_rel,
    )?;

    let mut kept_rows = Vec::new();
    let mut kept_labels = Vec::new();
    let mut removed = BTreeSet::new();
    let mut relabels: BTreeMap<SampleId, Pid> = BTreeMap::new();
    let (mut n_kept, mut n_relabeled) = (0, 0);
    for (i, d) in decisions.iter().enumerate() {
        match d.verdict {
            Verdict::Remove => {
                removed.insert(d.sample_id);
            }
            Verdict::Keep => {
                n_kept += 1;
                kept_rows.push(i);
                kept_labels.push(labels[i]);
            }
            Verdict::Relabel => {
                let to = d.new_pid.expect("relabel carries a pid");
                n_relabeled += 1;
                relabels.insert(d.sample_id, to);
                kept_rows.push(i);
                kept_labels.push(to);
            }
        }
    }
    let kept = embedded.gather(&kept_rows);

    let pids_before = memory.len();
    let mut work = memory.clone();
    let mapping;
    let components;
    if config.merge_before_ema {
        let merged = merge_pids(&work, config.tau_merge)?;
        let mapped: Vec<Pid> = kept_labels.iter().map(|p| merged.mapping[p]).collect();
        work = merged.memory;
        ema_update(&mut work, &group_means(&kept, &mapped)?, config.alpha)?;
        mapping = merged.mapping;
        components = merged.components;
    } else {
        ema_update(&mut work, &group_means(&kept, &kept_labels)?, config.alpha)?;
        let merged = merge_pids(&work, config.tau_merge)?;
        work = merged.memory;
        mapping = merged.mapping;
        components = merged.components;
    }

    let refined = manifest.map_pids(|r| {
        if r.source != Source::SingleCamera {
            return r.pid;
        }
        let p = relabels.get(&r.sample_id).copied().unwrap_or(r.pid);
        mapping.get(&p).copied().unwrap_or(p)
    })?;
    let live: BTreeSet<Pid> = refined
        .records()
        .iter()
        .filter(|r| r.source == Source::SingleCamera && r.split == Split::Train)
        .map(|r| r.pid)
        .collect();
    let before_prune = work.len();
    work.retain(|p| live.contains(&p));
    let pids_pruned = before_prune - work.len();
    if let Some(&p) = live.iter().find(|&&p| !work.contains(p)) {
        return Err(Error::MissingCentroid(p));
    }

    let report = RefinementReport {
        epoch: work.epoch_stamp(),
        n_input_images: decisions.len(),
        n_removed: removed.len(),
        n_relabeled,
        n_kept,
        pids_before,
        pids_after: work.len(),
        merge_components: components,
        pids_pruned,
        n_manifest_images: refined.counts().n_s,
        cross_video_pids: refined.cross_video_pids(),
    };
    Ok(EpochOutcome {
        manifest: refined,
        memory: work,
        report,
        removed,
        subset,
        decisions,
        mapping,
    })
}
