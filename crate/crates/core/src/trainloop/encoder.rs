//! Affine toy encoder `e = W x + b`, kept in f64 so gradients stay exact.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{decode_embeddings_prefix, encode_embeddings};
use crate::rng::StageRng;
use crate::types::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    d_in: usize,
    d_out: usize,
    /// Row-major `d_out x d_in`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl EncoderParams {
    pub fn new(d_in: usize, d_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != d_in * d_out || bias.len() != d_out {
            return Err(Error::ShapeMismatch(format!(
                "{} weights and {} biases for a {d_out}x{d_in} encoder",
                weights.len(),
                bias.len()
            )));
        }
        if let Some(k) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite { row: k / d_in.max(1) });
        }
        if let Some(k) = bias.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite { row: k });
        }
        Ok(EncoderParams { d_in, d_out, weights, bias })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for k in 0..dim {
            weights[k * dim + k] = 1.0;
        }
        EncoderParams { d_in: dim, d_out: dim, weights, bias: vec![0.0; dim] }
    }

    /// Gaussian weights with variance `1 / d_in`, zero bias.
    pub fn random(d_in: usize, d_out: usize, rng: &mut StageRng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d_in.max(1) as f64).sqrt()).expect("positive std");
        let weights = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        EncoderParams { d_in, d_out, weights, bias: vec![0.0; d_out] }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Encodes one row into `out` (length `d_out`).
    pub fn encode_row(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weights[k * self.d_in..(k + 1) * self.d_in];
            *o = self.bias[k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// f64 encoding of rows given as f64 slices.
    pub fn encode_f64(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|x| {
                if x.len() != self.d_in {
                    return Err(Error::DimMismatch { expected: self.d_in, actual: x.len() });
                }
                let mut out = vec![0.0; self.d_out];
                self.encode_row(x, &mut out);
                Ok(out)
            })
            .collect()
    }

    /// Euclidean distance to `other` over all parameters.
    pub fn distance(&self, other: &EncoderParams) -> Result<f64> {
        self.check_same_shape(other)?;
        let sq: f64 = self
            .weights
            .iter()
            .zip(&other.weights)
            .chain(self.bias.iter().zip(&other.bias))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq.sqrt())
    }

    fn check_same_shape(&self, other: &EncoderParams) -> Result<()> {
        if self.d_in != other.d_in || self.d_out != other.d_out {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} encoder vs {}x{}",
                self.d_out, self.d_in, other.d_out, other.d_in
            )));
        }
        Ok(())
    }

    /// Weights block (dim `d_in`, `d_out` rows) followed by a bias block
    /// (dim `d_out`, one row), both in the embedding file format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let w = EmbeddingMatrix::new(self.d_in, self.weights.iter().map(|&v| v as f32).collect())
            .expect("finite weights");
        let b = EmbeddingMatrix::new(self.d_out, self.bias.iter().map(|&v| v as f32).collect())
            .expect("finite bias");
        let mut out = encode_embeddings(&w);
        out.extend(encode_embeddings(&b));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, used) = decode_embeddings_prefix(bytes)?;
        let (b, used_b) = decode_embeddings_prefix(&bytes[used..])?;
        if used + used_b != bytes.len() {
            return Err(Error::ShapeMismatch("trailing bytes after encoder bias".into()));
        }
        if b.rows() != 1 || b.dim() != w.rows() {
            return Err(Error::ShapeMismatch(format!(
                "bias block is {}x{}, expected 1x{}",
                b.rows(),
                b.dim(),
                w.rows()
            )));
        }
        EncoderParams::new(
            w.dim(),
            w.rows(),
            w.as_slice().iter().map(|&v| v as f64).collect(),
            b.as_slice().iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Row-wise affine map of `raw` (f32 in, f32 out).
pub fn encode(params: &EncoderParams, raw: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if raw.rows() > 0 && raw.dim() != params.d_in {
        return Err(Error::DimMismatch { expected: params.d_in, actual: raw.dim() });
    }
    let mut data = Vec::with_capacity(raw.rows() * params.d_out);
    let mut x = vec![0.0; params.d_in];
    let mut out = vec![0.0; params.d_out];
    for row in raw.iter_rows() {
        for (a, &b) in x.iter_mut().zip(row) {
            *a = b as f64;
        }
        params.encode_row(&x, &mut out);
        data.extend(out.iter().map(|&v| v as f32));
    }
    EmbeddingMatrix::new(params.d_out, data)
}

/// `lambda * theta_m + (1 - lambda) * theta_e`, elementwise.
pub fn momentum_update(theta_m: &EncoderParams, theta_e: &EncoderParams, lambda: f64) -> Result<EncoderParams> {
    theta_m.check_same_shape(theta_e)?;
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("momentum {lambda} outside [0, 1)")));
    }
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(m, e)| lambda * m + (1.0 - lambda) * e).collect() };
    Ok(EncoderParams {
        d_in: theta_m.d_in,
        d_out: theta_m.d_out,
        weights: mix(&theta_m.weights, &theta_e.weights),
        bias: mix(&theta_m.bias, &theta_e.bias),
    })
}
