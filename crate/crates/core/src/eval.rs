//! Retrieval metrics: CMC Rank-k and mAP with the usual cross-camera rule
//! (gallery items sharing both pid and camera with the query are ignored).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::similarity::{pairwise_similarity, SimilarityMatrix};
use crate::types::{DatasetManifest, EmbeddingMatrix, SampleRecord, Split};

pub const RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalResult {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub n_queries: usize,
    /// Queries without any valid gallery match.
    pub n_skipped: usize,
}

impl RetrievalResult {
    /// `rank1 \t rank5 \t rank10 \t mAP \t n_queries`
    pub fn to_line(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.rank1, self.rank5, self.rank10, self.map, self.n_queries
        )
    }

    pub fn to_human(&self) -> String {
        format!(
            "Rank-1   {:6.2}%\nRank-5   {:6.2}%\nRank-10  {:6.2}%\nmAP      {:6.2}%\nqueries  {} evaluated, {} skipped\n",
            100.0 * self.rank1,
            100.0 * self.rank5,
            100.0 * self.rank10,
            100.0 * self.map,
            self.n_queries,
            self.n_skipped
        )
    }
}

/// Per-query outcome: index of the first correct match among valid gallery
/// items (0-based) and the average precision.
fn score_query(scores: &[f64], q: &SampleRecord, gallery: &[SampleRecord]) -> Option<(usize, f64)> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&g| !(gallery[g].pid == q.pid && gallery[g].context_id == q.context_id))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(gallery[a].sample_id.cmp(&gallery[b].sample_id))
    });
    let mut first = None;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (pos, &g) in order.iter().enumerate() {
        if gallery[g].pid == q.pid {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos);
        }
    }
    first.map(|f| (f, precision_sum / hits as f64))
}

/// Metrics from a precomputed query x gallery score matrix.
pub fn evaluate_scores(scores: &SimilarityMatrix, queries: &[SampleRecord], gallery: &[SampleRecord]) -> Result<RetrievalResult> {
    if scores.rows() != queries.len() || scores.cols() != gallery.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} scores for {} queries and {} gallery items",
            scores.rows(),
            scores.cols(),
            queries.len(),
            gallery.len()
        )));
    }
    let outcomes: Vec<Option<(usize, f64)>> = (0..queries.len())
        .into_par_iter()
        .map(|i| score_query(scores.row(i), &queries[i], gallery))
        .collect();
    let done: Vec<(usize, f64)> = outcomes.iter().flatten().copied().collect();
    if done.is_empty() {
        return Err(Error::NoValidGallery);
    }
    let n = done.len() as f64;
    let rank = |k: usize| done.iter().filter(|(f, _)| *f < k).count() as f64 / n;
    Ok(RetrievalResult {
        rank1: rank(RANKS[0]),
        rank5: rank(RANKS[1]),
        rank10: rank(RANKS[2]),
        map: done.iter().map(|(_, ap)| ap).sum::<f64>() / n,
        n_queries: done.len(),
        n_skipped: queries.len() - done.len(),
    })
}

/// Ranks the gallery for every query by descending cosine similarity, ties
/// broken by ascending gallery sample id.
pub fn evaluate(
    query_emb: &EmbeddingMatrix,
    queries: &[SampleRecord],
    gallery_emb: &EmbeddingMatrix,
    gallery: &[SampleRecord],
) -> Result<RetrievalResult> {
    if query_emb.rows() != queries.len() || gallery_emb.rows() != gallery.len() {
        return Err(Error::ShapeMismatch("embedding rows do not match records".into()));
    }
    let scores = pairwise_similarity(query_emb, gallery_emb)?;
    evaluate_scores(&scores, queries, gallery)
}

/// Splits a manifest (with one embedding row per record) into its query and
/// gallery parts and evaluates them.
pub fn evaluate_manifest(manifest: &DatasetManifest, embeddings: &EmbeddingMatrix) -> Result<RetrievalResult> {
    if embeddings.rows() != manifest.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding rows for {} records",
            embeddings.rows(),
            manifest.len()
        )));
    }
    let pick = |split: Split| -> (Vec<usize>, Vec<SampleRecord>) {
        manifest
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, r)| (i, *r))
            .unzip()
    };
    let (qi, q) = pick(Split::Query);
    let (gi, g) = pick(Split::Gallery);
    evaluate(&embeddings.gather(&qi), &q, &embeddings.gather(&gi), &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Source;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: u64, pid: u64, cam: u32) -> SampleRecord {
        SampleRecord { sample_id: id, pid, source: Source::MultiCamera, context_id: cam, split: Split::Gallery }
    }

    #[test]
    fn perfect_retrieval() {
        let q = EmbeddingMatrix::from_rows(3, &[[1.0, 0.0, 0.0]]).unwrap();
        let g = EmbeddingMatrix::from_rows(3, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let r = evaluate(&q, &[rec(0, 7, 0)], &g, &[rec(1, 7, 1), rec(2, 8, 0), rec(3, 9, 2)]).unwrap();
        assert_eq!((r.rank1, r.map, r.n_queries), (1.0, 1.0, 1));
    }

    #[test]
    fn match_ranked_second() {
        let q = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0]]).unwrap();
        let g = EmbeddingMatrix::from_rows(2, &[[0.6, 0.8], [1.0, 0.1]]).unwrap();
        let r = evaluate(&q, &[rec(0, 1, 0)], &g, &[rec(1, 1, 1), rec(2, 2, 1)]).unwrap();
        assert_eq!((r.rank1, r.rank5, r.map), (0.0, 1.0, 0.5));
    }

    #[test]
    fn same_camera_matches_are_ignored() {
        let q = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let g = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0]]).unwrap();
        let r = evaluate(&q, &[rec(0, 1, 0), rec(1, 2, 0)], &g, &[rec(5, 2, 1)]).unwrap();
        assert_eq!((r.n_queries, r.n_skipped), (1, 1));
        assert!(matches!(
            evaluate(&q.gather(&[0]), &[rec(0, 1, 0)], &g, &[rec(5, 1, 0)]),
            Err(Error::NoValidGallery)
        ));
        assert!(matches!(
            evaluate(&EmbeddingMatrix::zeros(3, 1), &[rec(0, 1, 0)], &g, &[rec(5, 1, 1)]),
            Err(Error::DimMismatch { .. })
        ));
    }

    /// Full sort of every gallery item, then exclusion, then AP straight
    /// from the definition.
    fn naive_map(scores: &SimilarityMatrix, q: &[SampleRecord], g: &[SampleRecord]) -> (f64, f64) {
        let mut aps = Vec::new();
        let mut r1 = 0.0;
        for i in 0..q.len() {
            let mut all: Vec<(f64, u64, usize)> = (0..g.len()).map(|j| (scores.get(i, j), g[j].sample_id, j)).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let kept: Vec<usize> = all
                .iter()
                .map(|t| t.2)
                .filter(|&j| !(g[j].pid == q[i].pid && g[j].context_id == q[i].context_id))
                .collect();
            let hit_positions: Vec<usize> = (0..kept.len()).filter(|&p| g[kept[p]].pid == q[i].pid).collect();
            if hit_positions.is_empty() {
                continue;
            }
            if hit_positions[0] == 0 {
                r1 += 1.0;
            }
            let ap: f64 = hit_positions
                .iter()
                .enumerate()
                .map(|(h, &p)| (h + 1) as f64 / (p + 1) as f64)
                .sum::<f64>()
                / hit_positions.len() as f64;
            aps.push(ap);
        }
        (r1 / aps.len() as f64, aps.iter().sum::<f64>() / aps.len() as f64)
    }

    fn random_case(seed: u64) -> (SimilarityMatrix, Vec<SampleRecord>, Vec<SampleRecord>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<SampleRecord> = (0..20).map(|i| rec(i, rng.random_range(0..6), rng.random_range(0..3))).collect();
        let g: Vec<SampleRecord> = (0..60).map(|i| rec(100 + i, rng.random_range(0..6), rng.random_range(0..3))).collect();
        // Coarse scores so that ties occur.
        let data = (0..20 * 60).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
        (SimilarityMatrix::from_vec(20, 60, data), q, g)
    }

    #[test]
    fn matches_exhaustive_oracle() {
        for seed in 0..10 {
            let (s, q, g) = random_case(seed);
            let r = evaluate_scores(&s, &q, &g).unwrap();
            let (r1, map) = naive_map(&s, &q, &g);
            assert!((r.rank1 - r1).abs() < 1e-12);
            assert!((r.map - map).abs() < 1e-12);
            assert!(r.rank1 <= r.rank5 && r.rank5 <= r.rank10);
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let (s, q, g) = random_case(3);
        let t = SimilarityMatrix::from_vec(s.rows(), s.cols(), s.values().iter().map(|v| (3.0 * v).exp() - 7.0).collect());
        assert_eq!(evaluate_scores(&s, &q, &g).unwrap(), evaluate_scores(&t, &q, &g).unwrap());
    }

    #[test]
    fn duplicated_gallery() {
        let (s, q, g) = random_case(5);
        let mut g2 = g.clone();
        g2.extend(g.iter().map(|r| SampleRecord { sample_id: r.sample_id + 1000, ..*r }));
        let mut data = Vec::new();
        for i in 0..s.rows() {
            data.extend_from_slice(s.row(i));
            data.extend_from_slice(s.row(i));
        }
        let s2 = SimilarityMatrix::from_vec(s.rows(), 2 * s.cols(), data);
        let a = evaluate_scores(&s, &q, &g).unwrap();
        let b = evaluate_scores(&s2, &q, &g2).unwrap();
        assert_eq!(a.rank1, b.rank1);

        // With every correct match ranked ahead of every distractor the AP
        // stays 1 after duplication.
        let q = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0]]).unwrap();
        let g = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]).unwrap();
        let recs = [rec(1, 1, 1), rec(2, 1, 2), rec(3, 2, 1), rec(11, 1, 1), rec(12, 1, 2), rec(13, 2, 1)];
        let r = evaluate(&q, &[rec(0, 1, 0)], &g, &recs).unwrap();
        assert_eq!((r.rank1, r.map), (1.0, 1.0));
    }
}
