//! Rectangular linear assignment (Hungarian method, shortest augmenting
//! paths with row/column potentials).

use crate::error::{Error, Result};

/// Dense row-major cost matrix with `rows <= cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} cost matrix",
                data.len()
            )));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged cost rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `columns[i]` is the column matched to row `i`.
    pub columns: Vec<usize>,
    pub total: f64,
}

/// Minimum-cost matching of rows to distinct columns over the sub-matrix
/// `rows x cols` of `cost` (index lists). Returns positions into `cols`.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(n <= m);
    let c = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    // 1-based potentials; column 0 is the virtual root of each search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

fn total_of(cost: &CostMatrix, rows: &[usize], cols: &[usize], picks: &[usize]) -> f64 {
    picks
        .iter()
        .enumerate()
        .map(|(i, &p)| cost.get(rows[i], cols[p]))
        .sum()
}

/// Columns that can appear in some optimal assignment: row `i` never needs a
/// column costlier than its n-th cheapest, since at most n-1 other rows can
/// block the cheaper ones. Ties at the cut-off are kept.
fn candidate_columns(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.rows();
    let mut keep = vec![false; cost.cols()];
    let mut sorted = Vec::with_capacity(cost.cols());
    for i in 0..n {
        sorted.clear();
        sorted.extend_from_slice(cost.row(i));
        sorted.sort_by(f64::total_cmp);
        let cutoff = sorted[n - 1];
        for (j, &c) in cost.row(i).iter().enumerate() {
            if c <= cutoff {
                keep[j] = true;
            }
        }
    }
    (0..cost.cols()).filter(|&j| keep[j]).collect()
}

/// Minimum-cost assignment of every row to a distinct column. Among optimal
/// assignments the lexicographically smallest column vector is returned.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows(), cost.cols());
    if n > m {
        return Err(Error::Infeasible(format!("{n} rows but only {m} columns")));
    }
    if cost.values().iter().any(|c| !c.is_finite()) {
        return Err(Error::Infeasible("non-finite cost".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            columns: Vec::new(),
            total: 0.0,
        });
    }
    let cols = candidate_columns(cost);
    let all_rows: Vec<usize> = (0..n).collect();
    let mut best = solve(cost, &all_rows, &cols);
    let optimum = total_of(cost, &all_rows, &cols, &best);
    let scale = cost.values().iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let eps = 1e-9 * (1.0 + scale * n as f64);

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut prefix_cost = 0.0;
    for i in 0..n {
        let used: Vec<usize> = best[..i].to_vec();
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        for (pos, &col) in cols.iter().enumerate() {
            if pos >= best[i] {
                break;
            }
            if used.contains(&pos) {
                continue;
            }
            let fixed = prefix_cost + cost.get(i, col);
            let free: Vec<usize> = (0..cols.len())
                .filter(|p| *p != pos && !used.contains(p))
                .collect();
            let free_cols: Vec<usize> = free.iter().map(|&p| cols[p]).collect();
            let tail = solve(cost, &rest_rows, &free_cols);
            let total = fixed + total_of(cost, &rest_rows, &free_cols, &tail);
            if total <= optimum + eps {
                best[i] = pos;
                for (k, &t) in tail.iter().enumerate() {
                    best[i + 1 + k] = free[t];
                }
                break;
            }
        }
        prefix_cost += cost.get(i, cols[best[i]]);
    }
    let columns: Vec<usize> = best.iter().map(|&p| cols[p]).collect();
    let total = columns.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(Assignment { columns, total })
}
