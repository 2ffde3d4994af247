//! Cosine similarity, scalar and all-pairs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::EmbeddingMatrix;

/// Norms below this are treated as corrupt input.
pub const MIN_NORM: f64 = 1e-12;

pub(crate) fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine of the angle between `a` and `b`, accumulated in f64.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = norm(a);
    if na < MIN_NORM {
        return Err(Error::ZeroNormVector { row: 0 });
    }
    let nb = norm(b);
    if nb < MIN_NORM {
        return Err(Error::ZeroNormVector { row: 1 });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Dense n x m matrix of f64 similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "similarity matrix shape");
        SimilarityMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> SimilarityMatrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        SimilarityMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

fn row_norms(m: &EmbeddingMatrix) -> Result<Vec<f64>> {
    m.iter_rows()
        .take(m.rows())
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n < MIN_NORM {
                Err(Error::ZeroNormVector { row: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Entry `(i, j)` is the cosine between row `i` of `a` and row `j` of `b`.
/// Rows of the output are computed in parallel.
pub fn pairwise_similarity(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if a.rows() > 0 && b.rows() > 0 && a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let cols = b.rows();
    let mut data = vec![0.0f64; a.rows() * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
            let ra = a.row(i);
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = (dot(ra, b.row(j)) / (na[i] * nb[j])).clamp(-1.0, 1.0);
            }
        });
    }
    Ok(SimilarityMatrix {
        rows: a.rows(),
        cols,
        data,
    })
}
