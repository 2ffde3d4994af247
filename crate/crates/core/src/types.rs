//! Domain types shared by every stage: embedding matrices, sample records
//! and dataset manifests.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Identity label. Multi-camera and single-camera records use disjoint values.
pub type Pid = u64;
pub type SampleId = u64;

/// Dense row-major f32 matrix, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            if !data.is_empty() {
                return Err(Error::DimMismatch {
                    expected: 0,
                    actual: data.len(),
                });
            }
        } else if !data.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim });
        }
        Ok(EmbeddingMatrix { dim, data })
    }

    pub fn zeros(dim: usize, rows: usize) -> Self {
        EmbeddingMatrix {
            dim,
            data: vec![0.0; dim * rows],
        }
    }

    /// Builds a matrix from individual rows; every row must have length `dim`.
    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(dim * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// New matrix holding the given rows, in the given order.
    pub fn gather(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            dim: self.dim,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    MultiCamera,
    SingleCamera,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::MultiCamera => "M",
            Source::SingleCamera => "S",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "M" => Some(Source::MultiCamera),
            "S" => Some(Source::SingleCamera),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

/// Metadata for one image. `context_id` is the camera id for multi-camera
/// records and the video id for single-camera records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: SampleId,
    pub pid: Pid,
    pub source: Source,
    pub context_id: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ManifestCounts {
    /// Multi-camera images.
    pub n_m: usize,
    /// Single-camera images.
    pub n_s: usize,
    /// Distinct multi-camera pids.
    pub m_m: usize,
    /// Distinct single-camera pids.
    pub m_s: usize,
    /// Distinct cameras among multi-camera records.
    pub k_m: usize,
}

/// Validated list of records, kept sorted by sample id. Row `i` of any
/// embedding matrix paired with a manifest belongs to `records()[i]`.
///
/// Tracker-produced labels never put one single-camera pid in two videos.
/// Refined manifests (after relabeling and merging) may, and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    counts: ManifestCounts,
    refined: bool,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        Self::build(records, false)
    }

    /// Like [`DatasetManifest::new`] without the one-video-per-pid check.
    pub fn new_refined(records: Vec<SampleRecord>) -> Result<Self> {
        Self::build(records, true)
    }

    fn build(mut records: Vec<SampleRecord>, refined: bool) -> Result<Self> {
        records.sort_by_key(|r| r.sample_id);
        for w in records.windows(2) {
            if w[0].sample_id == w[1].sample_id {
                return Err(Error::DuplicateSampleId(w[0].sample_id));
            }
        }
        let mut video_of: HashMap<Pid, u32> = HashMap::new();
        let mut multi = BTreeSet::new();
        let mut single = BTreeSet::new();
        for r in &records {
            match r.source {
                Source::MultiCamera => {
                    multi.insert(r.pid);
                }
                Source::SingleCamera => {
                    single.insert(r.pid);
                    match video_of.get(&r.pid) {
                        Some(&v) if v != r.context_id && !refined => {
                            return Err(Error::CrossVideoPid {
                                pid: r.pid,
                                first: v,
                                second: r.context_id,
                            })
                        }
                        Some(_) => {}
                        None => {
                            video_of.insert(r.pid, r.context_id);
                        }
                    }
                }
            }
        }
        if let Some(&pid) = multi.intersection(&single).next() {
            return Err(Error::PidNamespaceOverlap(pid));
        }
        let counts = Self::recount(&records);
        Ok(DatasetManifest {
            records,
            counts,
            refined,
        })
    }

    pub fn empty() -> Self {
        DatasetManifest {
            records: Vec::new(),
            counts: ManifestCounts::default(),
            refined: false,
        }
    }

    pub fn is_refined(&self) -> bool {
        self.refined
    }

    /// Single-camera pids that occur under more than one video.
    pub fn cross_video_pids(&self) -> usize {
        let mut videos: BTreeMap<Pid, BTreeSet<u32>> = BTreeMap::new();
        for r in &self.records {
            if r.source == Source::SingleCamera {
                videos.entry(r.pid).or_default().insert(r.context_id);
            }
        }
        videos.values().filter(|v| v.len() > 1).count()
    }

    fn recount(records: &[SampleRecord]) -> ManifestCounts {
        let mut c = ManifestCounts::default();
        let mut multi = BTreeSet::new();
        let mut single = BTreeSet::new();
        let mut cams = BTreeSet::new();
        for r in records {
            match r.source {
                Source::MultiCamera => {
                    c.n_m += 1;
                    multi.insert(r.pid);
                    cams.insert(r.context_id);
                }
                Source::SingleCamera => {
                    c.n_s += 1;
                    single.insert(r.pid);
                }
            }
        }
        c.m_m = multi.len();
        c.m_s = single.len();
        c.k_m = cams.len();
        c
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn counts(&self) -> ManifestCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Row index of a sample id.
    pub fn row_of(&self, sample_id: SampleId) -> Option<usize> {
        self.records
            .binary_search_by_key(&sample_id, |r| r.sample_id)
            .ok()
    }

    pub fn record(&self, sample_id: SampleId) -> Option<&SampleRecord> {
        self.row_of(sample_id).map(|i| &self.records[i])
    }

    /// Sample ids grouped by pid for records matching `source` and `split`.
    pub fn group_by_pid(&self, source: Source, split: Split) -> BTreeMap<Pid, Vec<SampleId>> {
        let mut groups: BTreeMap<Pid, Vec<SampleId>> = BTreeMap::new();
        for r in &self.records {
            if r.source == source && r.split == split {
                groups.entry(r.pid).or_default().push(r.sample_id);
            }
        }
        groups
    }

    /// Rewrites pids through `f`. The result is a refined manifest.
    pub fn map_pids(&self, mut f: impl FnMut(&SampleRecord) -> Pid) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| SampleRecord { pid: f(r), ..*r })
            .collect();
        Self::new_refined(records)
    }

    /// Records accepted by `keep`, as a new manifest.
    pub fn filter(&self, mut keep: impl FnMut(&SampleRecord) -> bool) -> Self {
        let records: Vec<_> = self.records.iter().copied().filter(|r| keep(r)).collect();
        let counts = Self::recount(&records);
        DatasetManifest {
            records,
            counts,
            refined: self.refined,
        }
    }
}
