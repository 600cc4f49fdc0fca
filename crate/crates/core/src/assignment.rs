//! Rectangular linear assignment with forbidden pairs.
//!
//! Shortest augmenting path Hungarian method with row/column potentials,
//! O(n^3) in `n = max(rows, cols)`. Rectangular inputs are padded to square
//! and forbidden pairs receive a sentinel cost large enough that any matching
//! with more real pairs beats any matching with fewer, so the result is a
//! maximum-cardinality matching of minimum cost.

use crate::error::{Error, Result};

/// Dense cost matrix; `f64::INFINITY` marks a forbidden pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub const FORBIDDEN: f64 = f64::INFINITY;

    pub fn new(rows: usize, cols: usize) -> Self {
        CostMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut m = CostMatrix::new(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape("ragged cost matrix".into()));
            }
            for (j, &v) in r.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Sets a cost; `CostMatrix::FORBIDDEN` is allowed, NaN and -inf are not.
    pub fn set(&mut self, row: usize, col: usize, cost: f64) -> Result<()> {
        if cost.is_nan() || cost == f64::NEG_INFINITY {
            return Err(Error::Input(format!("invalid cost {cost} at ({row}, {col})")));
        }
        self.data[row * self.cols + col] = cost;
        Ok(())
    }

    pub fn forbid(&mut self, row: usize, col: usize) {
        self.data[row * self.cols + col] = Self::FORBIDDEN;
    }

    pub fn is_forbidden(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == Self::FORBIDDEN
    }

    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| self.get(i, j)).sum()
    }
}

/// Minimum-cost maximum-cardinality matching; pairs sorted by row.
pub fn solve(costs: &CostMatrix) -> Vec<(usize, usize)> {
    let n = costs.rows.max(costs.cols);
    let allowed = || costs.data.iter().copied().filter(|c| c.is_finite());
    let Some(lo) = allowed().reduce(f64::min) else {
        return Vec::new();
    };
    let hi = allowed().fold(lo, f64::max);
    let sentinel = (n as f64 + 1.0) * (hi - lo + 1.0);

    // 1-indexed square matrix as in the classic potentials formulation
    let a = |i: usize, j: usize| -> f64 {
        if i <= costs.rows && j <= costs.cols {
            let c = costs.get(i - 1, j - 1);
            if c.is_finite() {
                return c - lo;
            }
        }
        sentinel
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let i = col_owner[j];
            (i >= 1 && i <= costs.rows && j <= costs.cols && !costs.is_forbidden(i - 1, j - 1))
                .then_some((i - 1, j - 1))
        })
        .collect();
    pairs.sort_unstable();
    pairs
}
