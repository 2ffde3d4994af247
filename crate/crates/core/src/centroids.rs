//! Centroids memory for single-camera identities and its update rules.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{format_int_pairs, parse_int_pairs, read_embeddings, write_embeddings};
use crate::similarity::{norm, MIN_NORM};
use crate::types::{DatasetManifest, EmbeddingMatrix, Pid, Source, Split};

/// Map pid -> centroid vector, stored unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidsMemory {
    dim: usize,
    entries: BTreeMap<Pid, Vec<f32>>,
    epoch_stamp: u64,
}

impl CentroidsMemory {
    pub fn new(dim: usize) -> Self {
        CentroidsMemory {
            dim,
            entries: BTreeMap::new(),
            epoch_stamp: 0,
        }
    }

    pub fn from_entries(dim: usize, entries: BTreeMap<Pid, Vec<f32>>) -> Result<Self> {
        let mut m = Self::new(dim);
        for (pid, v) in entries {
            m.insert(pid, v)?;
        }
        Ok(m)
    }

    pub fn insert(&mut self, pid: Pid, centroid: Vec<f32>) -> Result<()> {
        if centroid.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: centroid.len(),
            });
        }
        check_centroid(pid, &centroid)?;
        self.entries.insert(pid, centroid);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, pid: Pid) -> Option<&[f32]> {
        self.entries.get(&pid).map(Vec::as_slice)
    }

    pub fn contains(&self, pid: Pid) -> bool {
        self.entries.contains_key(&pid)
    }

    pub fn pids(&self) -> impl Iterator<Item = Pid> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Pid, &[f32])> {
        self.entries.iter().map(|(&p, v)| (p, v.as_slice()))
    }

    pub fn epoch_stamp(&self) -> u64 {
        self.epoch_stamp
    }

    pub fn set_epoch_stamp(&mut self, stamp: u64) {
        self.epoch_stamp = stamp;
    }

    pub fn remove(&mut self, pid: Pid) -> Option<Vec<f32>> {
        self.entries.remove(&pid)
    }

    /// Drops every pid for which `keep` is false.
    pub fn retain(&mut self, mut keep: impl FnMut(Pid) -> bool) {
        self.entries.retain(|&p, _| keep(p));
    }

    /// Centroids of the given pids as matrix rows, in the given order.
    pub fn matrix_of(&self, pids: &[Pid]) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(pids.len() * self.dim);
        for &p in pids {
            data.extend_from_slice(self.get(p).ok_or(Error::MissingCentroid(p))?);
        }
        EmbeddingMatrix::new(self.dim, data)
    }

    /// All centroids in ascending pid order.
    pub fn to_matrix(&self) -> (Vec<Pid>, EmbeddingMatrix) {
        let pids: Vec<Pid> = self.pids().collect();
        let m = self.matrix_of(&pids).expect("own pids are present");
        (pids, m)
    }

    /// Writes `<path>` as an embedding file and `<path>.pids` as the
    /// `row_index  pid` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (pids, m) = self.to_matrix();
        write_embeddings(&m, path)?;
        let side = sidecar_path(path);
        let text = format_int_pairs(
            ["row_index", "pid"],
            pids.iter().enumerate().map(|(i, &p)| (i as u64, p)),
        );
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m = read_embeddings(path)?;
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let pairs = parse_int_pairs(&text, &side.display().to_string(), ["row_index", "pid"])?;
        if pairs.len() != m.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} centroid rows but {} pid entries",
                m.rows(),
                pairs.len()
            )));
        }
        let mut mem = CentroidsMemory::new(m.dim());
        for (row, pid) in pairs {
            let row = row as usize;
            if row >= m.rows() {
                return Err(Error::ShapeMismatch(format!("row index {row} out of range")));
            }
            mem.insert(pid, m.row(row).to_vec())?;
        }
        Ok(mem)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".pids");
    s.into()
}

fn check_centroid(pid: Pid, v: &[f32]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { row: pid as usize });
    }
    if norm(v) < MIN_NORM {
        return Err(Error::ZeroNormVector { row: pid as usize });
    }
    Ok(())
}

/// Per-pid arithmetic means of feature rows; `labels[i]` labels row `i`.
pub fn group_means(features: &EmbeddingMatrix, labels: &[Pid]) -> Result<BTreeMap<Pid, Vec<f32>>> {
    if labels.len() != features.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let dim = features.dim();
    let mut sums: BTreeMap<Pid, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &pid) in labels.iter().enumerate() {
        let (acc, n) = sums.entry(pid).or_insert_with(|| (vec![0.0; dim], 0));
        for (a, &x) in acc.iter_mut().zip(features.row(i)) {
            *a += x as f64;
        }
        *n += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(pid, (acc, n))| (pid, acc.into_iter().map(|s| (s / n as f64) as f32).collect()))
        .collect())
}

/// Memory whose centroid for each label is the mean of that label's rows.
pub fn initialize_centroids(features: &EmbeddingMatrix, labels: &[Pid]) -> Result<CentroidsMemory> {
    let means = group_means(features, labels)?;
    CentroidsMemory::from_entries(features.dim(), means)
}

/// Exponential moving average toward fresh per-pid means:
/// `mu <- alpha * mu + (1 - alpha) * mean`. Pids without a fresh mean keep
/// their centroid. The epoch stamp advances by one.
pub fn ema_update(
    memory: &mut CentroidsMemory,
    per_pid_means: &BTreeMap<Pid, Vec<f32>>,
    alpha: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1)")));
    }
    for (pid, mean) in per_pid_means {
        let mu = memory.entries.get(pid).ok_or(Error::UnknownPid(*pid))?;
        if mean.len() != memory.dim {
            return Err(Error::DimMismatch {
                expected: memory.dim,
                actual: mean.len(),
            });
        }
        let updated: Vec<f32> = mu
            .iter()
            .zip(mean)
            .map(|(&m, &f)| (alpha * m as f64 + (1.0 - alpha) * f as f64) as f32)
            .collect();
        check_centroid(*pid, &updated)?;
        memory.entries.insert(*pid, updated);
    }
    memory.epoch_stamp += 1;
    Ok(())
}

/// Exact per-pid means over every single-camera training image.
/// `embeddings` rows follow `manifest` order.
pub fn recompute_full(manifest: &DatasetManifest, embeddings: &EmbeddingMatrix) -> Result<CentroidsMemory> {
    if embeddings.rows() != manifest.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding rows for {} records",
            embeddings.rows(),
            manifest.len()
        )));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, r) in manifest.records().iter().enumerate() {
        if r.source == Source::SingleCamera && r.split == Split::Train {
            rows.push(i);
            labels.push(r.pid);
        }
    }
    initialize_centroids(&embeddings.gather(&rows), &labels)
}

/// Replaces each merge component by its canonical pid holding the unweighted
/// mean of the member centroids. `mapping` sends old pids to canonical pids;
/// pids missing from it map to themselves.
pub fn apply_merge(memory: &CentroidsMemory, mapping: &BTreeMap<Pid, Pid>) -> Result<CentroidsMemory> {
    let mut groups: BTreeMap<Pid, Vec<&[f32]>> = BTreeMap::new();
    for (pid, v) in memory.iter() {
        let canon = mapping.get(&pid).copied().unwrap_or(pid);
        groups.entry(canon).or_default().push(v);
    }
    let mut out = CentroidsMemory::new(memory.dim);
    out.epoch_stamp = memory.epoch_stamp;
    for (canon, members) in groups {
        if members.len() == 1 {
            out.insert(canon, members[0].to_vec())?;
            continue;
        }
        let mut acc = vec![0.0f64; memory.dim];
        for m in &members {
            acc.iter_mut().zip(m.iter()).for_each(|(a, &x)| *a += x as f64);
        }
        let n = members.len() as f64;
        out.insert(canon, acc.into_iter().map(|a| (a / n) as f32).collect())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{SampleRecord, Source, Split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mem(entries: &[(Pid, &[f32])]) -> CentroidsMemory {
        CentroidsMemory::from_entries(
            entries[0].1.len(),
            entries.iter().map(|(p, v)| (*p, v.to_vec())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_examples() {
        let f = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = initialize_centroids(&f, &[7, 7]).unwrap();
        assert_eq!(m.get(7).unwrap(), &[0.5, 0.5]);

        let m = initialize_centroids(&f, &[1, 2]).unwrap();
        assert_eq!(m.get(1).unwrap(), f.row(0));
        assert_eq!(m.get(2).unwrap(), f.row(1));
    }

    #[test]
    fn init_matches_independent_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f32>> = (0..40)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let labels: Vec<Pid> = (0..40).map(|_| rng.random_range(0..6)).collect();
        let f = EmbeddingMatrix::from_rows(5, &rows).unwrap();
        let m = initialize_centroids(&f, &labels).unwrap();
        for pid in 0..6u64 {
            let members: Vec<&Vec<f32>> = rows.iter().zip(&labels).filter(|(_, &l)| l == pid).map(|(r, _)| r).collect();
            if members.is_empty() {
                assert!(m.get(pid).is_none());
                continue;
            }
            for k in 0..5 {
                let mean: f64 = members.iter().map(|r| r[k] as f64).sum::<f64>() / members.len() as f64;
                assert!((m.get(pid).unwrap()[k] as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_centroid_is_rejected() {
        let f = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert!(matches!(initialize_centroids(&f, &[3, 3]), Err(Error::ZeroNormVector { .. })));
    }

    #[test]
    fn ema_examples() {
        let mut m = mem(&[(1, &[1.0, 0.0])]);
        let means: BTreeMap<_, _> = [(1, vec![0.0, 1.0])].into_iter().collect();
        ema_update(&mut m, &means, 0.3).unwrap();
        let c = m.get(1).unwrap();
        assert!((c[0] - 0.3).abs() < 1e-7 && (c[1] - 0.7).abs() < 1e-7);
        assert_eq!(m.epoch_stamp(), 1);

        // Fixed point.
        let mut m = mem(&[(1, &[0.2, -0.4])]);
        let same: BTreeMap<_, _> = [(1, vec![0.2, -0.4])].into_iter().collect();
        for alpha in [0.0, 0.3, 0.9] {
            ema_update(&mut m, &same, alpha).unwrap();
            assert_eq!(m.get(1).unwrap(), &[0.2, -0.4]);
        }
    }

    #[test]
    fn ema_twice_expands_recurrence() {
        let mu = [1.0f32, 2.0, -1.0];
        let m1 = [0.5f32, -0.5, 2.0];
        let m2 = [-1.0f32, 1.0, 0.25];
        let mut m = mem(&[(4, &mu)]);
        ema_update(&mut m, &[(4, m1.to_vec())].into_iter().collect(), 0.5).unwrap();
        ema_update(&mut m, &[(4, m2.to_vec())].into_iter().collect(), 0.5).unwrap();
        for k in 0..3 {
            let expected = 0.25 * mu[k] + 0.25 * m1[k] + 0.5 * m2[k];
            assert!((m.get(4).unwrap()[k] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn ema_unknown_pid_and_absent_pids() {
        let mut m = mem(&[(1, &[1.0, 0.0]), (2, &[0.0, 1.0])]);
        let means: BTreeMap<_, _> = [(9, vec![0.0, 1.0])].into_iter().collect();
        assert!(matches!(ema_update(&mut m, &means, 0.3), Err(Error::UnknownPid(9))));
        let means: BTreeMap<_, _> = [(1, vec![0.0, 1.0])].into_iter().collect();
        ema_update(&mut m, &means, 0.3).unwrap();
        assert_eq!(m.get(2).unwrap(), &[0.0, 1.0]);
    }

    fn single(id: u64, pid: u64) -> SampleRecord {
        SampleRecord {
            sample_id: id,
            pid,
            source: Source::SingleCamera,
            context_id: 0,
            split: Split::Train,
        }
    }

    #[test]
    fn full_recompute_matches_streaming_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let records: Vec<_> = (0..n).map(|i| single(i, rng.random_range(0..5))).collect();
        let manifest = DatasetManifest::new(records).unwrap();
        let data: Vec<f32> = (0..n * 4).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let emb = EmbeddingMatrix::new(4, data).unwrap();
        let full = recompute_full(&manifest, &emb).unwrap();
        // One-pass running mean oracle.
        let mut running: BTreeMap<Pid, (Vec<f64>, f64)> = BTreeMap::new();
        for (i, r) in manifest.records().iter().enumerate() {
            let (mean, count) = running.entry(r.pid).or_insert((vec![0.0; 4], 0.0));
            *count += 1.0;
            for k in 0..4 {
                mean[k] += (emb.row(i)[k] as f64 - mean[k]) / *count;
            }
        }
        for (pid, (mean, _)) in running {
            for k in 0..4 {
                let got = full.get(pid).unwrap()[k] as f64;
                assert!((got - mean[k]).abs() <= 1e-5 * mean[k].abs().max(1e-3));
            }
        }
        let labels: Vec<Pid> = manifest.records().iter().map(|r| r.pid).collect();
        assert_eq!(initialize_centroids(&emb, &labels).unwrap(), full);
    }

    #[test]
    fn merge_examples() {
        let m = mem(&[(1, &[1.0, 0.0]), (2, &[0.0, 1.0])]);
        assert_eq!(apply_merge(&m, &BTreeMap::new()).unwrap(), m);
        let mapping: BTreeMap<_, _> = [(1, 1), (2, 1)].into_iter().collect();
        let merged = apply_merge(&m, &mapping).unwrap();
        assert_eq!(merged.get(1).unwrap(), &[0.5, 0.5]);
        assert!(merged.get(2).is_none());
    }

    #[test]
    fn three_way_merge_is_order_independent() {
        let vs: [[f32; 3]; 3] = [[0.3, 1.0, -0.2], [0.7, 0.1, 0.4], [-0.1, 0.5, 0.9]];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut results = Vec::new();
        for p in perms {
            // Assign the vectors to pids 10, 11, 12 in permuted order.
            let entries: Vec<(Pid, &[f32])> = (0..3).map(|k| (10 + k as u64, &vs[p[k]][..])).collect();
            let m = mem(&entries);
            let mapping: BTreeMap<_, _> = [(10, 10), (11, 10), (12, 10)].into_iter().collect();
            results.push(apply_merge(&m, &mapping).unwrap().get(10).unwrap().to_vec());
        }
        for r in &results {
            for k in 0..3 {
                let mean = (vs[0][k] + vs[1][k] + vs[2][k]) / 3.0;
                assert!((r[k] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.mxeb");
        let mut m = mem(&[(3, &[1.0, 0.5]), (8, &[0.0, 1.0])]);
        m.set_epoch_stamp(0);
        m.save(&path).unwrap();
        assert_eq!(CentroidsMemory::load(&path).unwrap(), m);
    }
}
