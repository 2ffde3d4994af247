//! Embedding-cost comparison between the K-per-pid refinement subset and a
//! full recompute of every single-camera centroid.

use std::cell::Cell;
use std::fmt::Write as _;
use std::time::Instant;

use crate::centroids::recompute_full;
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::relabel::run_relabeling_epoch;
use crate::rng::{stage_rng, Stage};
use crate::types::{DatasetManifest, EmbeddingMatrix, Source, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// `None` for the full recompute.
    pub k: Option<usize>,
    /// Rows pushed through the encoder in one epoch.
    pub embeddings: usize,
    /// Full-recompute count divided by this row's count.
    pub ratio: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn naive(&self) -> &BenchRow {
        self.rows.iter().find(|r| r.k.is_none()).expect("table always has a naive row")
    }

    pub fn for_k(&self, k: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.k == Some(k))
    }

    /// `method \t embeddings \t ratio` (timings are left out so the text is
    /// reproducible).
    pub fn to_text(&self) -> String {
        let mut out = String::from("method\tembeddings\tratio\n");
        for r in &self.rows {
            let name = r.k.map_or("naive".to_string(), |k| format!("K={k}"));
            let _ = writeln!(out, "{name}\t{}\t{:.4}", r.embeddings, r.ratio);
        }
        out
    }
}

/// Runs one refinement epoch per K with a counting identity encoder, plus
/// the full recompute, and reports how many rows each one embedded.
pub fn bench_centroids(
    manifest: &DatasetManifest,
    features: &EmbeddingMatrix,
    k_values: &[usize],
    config: &PipelineConfig,
) -> Result<BenchTable> {
    let start = Instant::now();
    let naive_count = manifest
        .records()
        .iter()
        .filter(|r| r.source == Source::SingleCamera && r.split == Split::Train)
        .count();
    let memory = recompute_full(manifest, features)?;
    let naive_seconds = start.elapsed().as_secs_f64();

    let mut rows = Vec::with_capacity(k_values.len() + 1);
    for &k in k_values {
        let cfg = PipelineConfig { k_per_pid: k, ..config.clone() };
        let counted = Cell::new(0usize);
        let embed = |x: &EmbeddingMatrix| {
            counted.set(counted.get() + x.rows());
            Ok(x.clone())
        };
        let mut rng = stage_rng(config.seed, Stage::Relabel);
        let start = Instant::now();
        run_relabeling_epoch(manifest, features, embed, &memory, &cfg, &mut rng)?;
        let n = counted.get();
        rows.push(BenchRow {
            k: Some(k),
            embeddings: n,
            ratio: naive_count as f64 / n.max(1) as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    rows.push(BenchRow { k: None, embeddings: naive_count, ratio: 1.0, seconds: naive_seconds });
    Ok(BenchTable { rows })
}
