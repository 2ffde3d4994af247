//! The four training losses with analytic gradients.
//!
//! All of them are softmax contrastive terms over cosine similarities scaled
//! by a temperature. Embeddings are L2-normalized inside each loss and the
//! returned gradients are taken with respect to the unnormalized input rows.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::similarity::MIN_NORM;
use crate::types::Pid;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Rows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLossGrad {
    pub value: f64,
    pub grad: Rows,
    pub grad_aug: Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_ins: f64,
    pub l_aug: f64,
    pub l_cen: f64,
    pub l_cc: f64,
    pub total: f64,
}

pub fn total_loss(l_ins: f64, l_aug: f64, l_cen: f64, l_cc: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_ins,
        l_aug,
        l_cen,
        l_cc,
        total: w.w_ins * l_ins + w.w_aug * l_aug + w.w_cen * l_cen + w.w_cc * l_cc,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &[f64], row: usize) -> Result<(Vec<f64>, f64)> {
    let n = dot(v, v).sqrt();
    if n < MIN_NORM {
        return Err(Error::ZeroNormVector { row });
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

fn normalize_rows(rows: &[Vec<f64>]) -> Result<(Rows, Vec<f64>)> {
    let mut z = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let (u, n) = normalize(r, i)?;
        z.push(u);
        norms.push(n);
    }
    Ok((z, norms))
}

/// Gradient through `z = v / |v|`: `(g - z (z . g)) / |v|`.
fn normalize_backward(z: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let zg = dot(z, g);
    z.iter().zip(g).map(|(zi, gi)| (gi - zi * zg) / norm).collect()
}

fn backward_rows(z: &[Vec<f64>], norms: &[f64], g: &[Vec<f64>]) -> Rows {
    z.iter().zip(norms).zip(g).map(|((z, &n), g)| normalize_backward(z, n, g)).collect()
}

struct Contrast {
    value: f64,
    d_anchor: Rows,
    d_key: Rows,
}

/// Mean over anchors of `-mean_{p in P(i)} log softmax_{a in D(i)}(a_i . k_a / tau)[p]`.
/// Anchors with no positives are skipped.
fn contrast(
    anchors: &[Vec<f64>],
    keys: &[Vec<f64>],
    tau: f64,
    candidates: impl Fn(usize) -> Vec<usize>,
    positives: impl Fn(usize) -> Vec<usize>,
) -> Contrast {
    let dim = anchors.first().map_or(0, Vec::len);
    let mut d_anchor = vec![vec![0.0; dim]; anchors.len()];
    let mut d_key = vec![vec![0.0; dim]; keys.len()];
    let mut value = 0.0;
    let mut counted = 0usize;
    for (i, a) in anchors.iter().enumerate() {
        let pos = positives(i);
        if pos.is_empty() {
            continue;
        }
        let cand = candidates(i);
        let logits: Vec<f64> = cand.iter().map(|&k| dot(a, &keys[k]) / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        let w_pos = 1.0 / pos.len() as f64;
        let mut pos_mean = 0.0;
        let mut coef: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        for &p in &pos {
            let at = cand.iter().position(|&k| k == p).expect("positives are candidates");
            pos_mean += w_pos * logits[at];
            coef[at] -= w_pos;
        }
        value += lse - pos_mean;
        counted += 1;
        for (&k, &c) in cand.iter().zip(&coef) {
            let c = c / tau;
            for d in 0..dim {
                d_anchor[i][d] += c * keys[k][d];
                d_key[k][d] += c * a[d];
            }
        }
    }
    if counted > 0 {
        let s = 1.0 / counted as f64;
        value *= s;
        d_anchor.iter_mut().chain(d_key.iter_mut()).flatten().for_each(|g| *g *= s);
    }
    Contrast { value, d_anchor, d_key }
}

fn check_batch(pids: &[Pid]) -> Result<()> {
    let mut counts: BTreeMap<Pid, usize> = BTreeMap::new();
    for &p in pids {
        *counts.entry(p).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateBatch(format!("{} distinct pid(s)", counts.len())));
    }
    if let Some((p, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::DegenerateBatch(format!("pid {p} has a single sample")));
    }
    Ok(())
}

fn check_rows(rows: &[Vec<f64>], labels: usize) -> Result<()> {
    if rows.len() != labels {
        return Err(Error::ShapeMismatch(format!("{} rows for {labels} labels", rows.len())));
    }
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimMismatch { expected: dim, actual: r.len() });
    }
    Ok(())
}

/// Every other row of the same pid is a positive; all other rows form the
/// denominator.
pub fn instance_loss(emb: &[Vec<f64>], pids: &[Pid], tau: f64) -> Result<LossGrad> {
    check_rows(emb, pids.len())?;
    check_batch(pids)?;
    let (z, norms) = normalize_rows(emb)?;
    let n = z.len();
    let c = contrast(
        &z,
        &z,
        tau,
        |i| (0..n).filter(|&a| a != i).collect(),
        |i| (0..n).filter(|&a| a != i && pids[a] == pids[i]).collect(),
    );
    let g: Rows = c
        .d_anchor
        .iter()
        .zip(&c.d_key)
        .map(|(a, k)| a.iter().zip(k).map(|(x, y)| x + y).collect())
        .collect();
    Ok(LossGrad { value: c.value, grad: backward_rows(&z, &norms, &g) })
}

/// Each row's own augmented view is its positive; the augmented views of
/// other pids are the negatives.
pub fn augmentation_loss(emb: &[Vec<f64>], aug: &[Vec<f64>], pids: &[Pid], tau: f64) -> Result<PairLossGrad> {
    check_rows(emb, pids.len())?;
    check_rows(aug, pids.len())?;
    check_batch(pids)?;
    let (z, norms) = normalize_rows(emb)?;
    let (za, norms_a) = normalize_rows(aug)?;
    let n = z.len();
    let c = contrast(
        &z,
        &za,
        tau,
        |i| (0..n).filter(|&a| a == i || pids[a] != pids[i]).collect(),
        |i| vec![i],
    );
    Ok(PairLossGrad {
        value: c.value,
        grad: backward_rows(&z, &norms, &c.d_anchor),
        grad_aug: backward_rows(&za, &norms_a, &c.d_key),
    })
}

/// Softmax over the centroids of the pids present in the batch, with the
/// row's own centroid as the target. Centroids are held constant.
pub fn centroids_loss(emb: &[Vec<f64>], pids: &[Pid], centroids: &BTreeMap<Pid, Vec<f64>>, tau: f64) -> Result<LossGrad> {
    check_rows(emb, pids.len())?;
    let batch: Vec<Pid> = pids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut keys = Vec::with_capacity(batch.len());
    for (k, &p) in batch.iter().enumerate() {
        let c = centroids.get(&p).ok_or(Error::MissingCentroid(p))?;
        keys.push(normalize(c, k)?.0);
    }
    let (z, norms) = normalize_rows(emb)?;
    let slot: Vec<usize> = pids.iter().map(|p| batch.binary_search(p).unwrap()).collect();
    let c = contrast(&z, &keys, tau, |_| (0..batch.len()).collect(), |i| vec![slot[i]]);
    Ok(LossGrad { value: c.value, grad: backward_rows(&z, &norms, &c.d_anchor) })
}

/// Per (pid, camera) centroids are built from the batch itself; each row is
/// pulled toward its pid's centroids on other cameras. Gradients flow
/// through the centroids. Pids seen on one camera only contribute nothing.
pub fn camera_centroids_loss(emb: &[Vec<f64>], pids: &[Pid], cameras: &[u32], tau: f64) -> Result<LossGrad> {
    check_rows(emb, pids.len())?;
    if cameras.len() != pids.len() {
        return Err(Error::ShapeMismatch(format!("{} cameras for {} rows", cameras.len(), pids.len())));
    }
    let dim = emb.first().map_or(0, Vec::len);
    let (z, norms) = normalize_rows(emb)?;
    let mut groups: BTreeMap<(Pid, u32), Vec<usize>> = BTreeMap::new();
    for (i, (&p, &c)) in pids.iter().zip(cameras).enumerate() {
        groups.entry((p, c)).or_default().push(i);
    }
    let group_keys: Vec<(Pid, u32)> = groups.keys().copied().collect();
    let members: Vec<&Vec<usize>> = groups.values().collect();
    let mut keys = Vec::with_capacity(members.len());
    let mut key_norms = Vec::with_capacity(members.len());
    for (g, rows) in members.iter().enumerate() {
        let mut mean = vec![0.0; dim];
        for &r in rows.iter() {
            for d in 0..dim {
                mean[d] += z[r][d];
            }
        }
        mean.iter_mut().for_each(|v| *v /= rows.len() as f64);
        let (k, n) = normalize(&mean, g)?;
        keys.push(k);
        key_norms.push(n);
    }
    let own: Vec<usize> = (0..pids.len())
        .map(|i| group_keys.binary_search(&(pids[i], cameras[i])).unwrap())
        .collect();
    let c = contrast(
        &z,
        &keys,
        tau,
        |i| (0..keys.len()).filter(|&g| g != own[i]).collect(),
        |i| {
            (0..keys.len())
                .filter(|&g| g != own[i] && group_keys[g].0 == pids[i])
                .collect()
        },
    );
    let mut dz = c.d_anchor;
    for (g, rows) in members.iter().enumerate() {
        let d_mean = normalize_backward(&keys[g], key_norms[g], &c.d_key[g]);
        let share = 1.0 / rows.len() as f64;
        for &r in rows.iter() {
            for d in 0..dim {
                dz[r][d] += share * d_mean[d];
            }
        }
    }
    Ok(LossGrad { value: c.value, grad: backward_rows(&z, &norms, &dz) })
}
