//! Minimum-cost rectangular assignment (`T` targets onto `N ≥ T` queries).

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Target→query pairs, one per target in target order.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        }
    }

    /// `query_of[j]` for every target.
    pub fn queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, i)| i).collect()
    }
}

struct Solution {
    col_of_row: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest augmenting path with potentials; `rows ≤ cols`, row-major costs.
fn solve(cost: &[f64], rows: usize, cols: usize) -> Solution {
    let c = |r: usize, k: usize| cost[(r - 1) * cols + (k - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut k0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[k0] = true;
            let r0 = owner[k0];
            let mut delta = f64::INFINITY;
            let mut k1 = 0;
            for k in 1..=cols {
                if used[k] {
                    continue;
                }
                let cur = c(r0, k) - u[r0] - v[k];
                if cur < minv[k] {
                    minv[k] = cur;
                    way[k] = k0;
                }
                if minv[k] < delta {
                    delta = minv[k];
                    k1 = k;
                }
            }
            for k in 0..=cols {
                if used[k] {
                    u[owner[k]] += delta;
                    v[k] -= delta;
                } else {
                    minv[k] -= delta;
                }
            }
            k0 = k1;
            if owner[k0] == 0 {
                break;
            }
        }
        loop {
            let k1 = way[k0];
            owner[k0] = owner[k1];
            k0 = k1;
            if k0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; rows];
    for k in 1..=cols {
        if owner[k] != 0 {
            col_of_row[owner[k] - 1] = k - 1;
        }
    }
    Solution { col_of_row, u, v }
}

fn total(cost: &[f64], cols: usize, cols_of_rows: &[usize]) -> f64 {
    cols_of_rows.iter().enumerate().map(|(r, &k)| cost[r * cols + k]).sum()
}

/// Optimal cost of rows `from..` restricted to columns not in `taken`, with
/// the chosen columns mapped back to original indices.
fn solve_rest(cost: &[f64], rows: usize, cols: usize, from: usize, taken: &[bool]) -> (f64, Vec<usize>) {
    let free: Vec<usize> = (0..cols).filter(|&k| !taken[k]).collect();
    let sub_rows = rows - from;
    if sub_rows == 0 {
        return (0.0, Vec::new());
    }
    let mut sub = Vec::with_capacity(sub_rows * free.len());
    for r in from..rows {
        sub.extend(free.iter().map(|&k| cost[r * cols + k]));
    }
    let s = solve(&sub, sub_rows, free.len());
    let mapped: Vec<usize> = s.col_of_row.iter().map(|&k| free[k]).collect();
    let t = mapped.iter().enumerate().map(|(r, &k)| cost[(from + r) * cols + k]).sum();
    (t, mapped)
}

/// Globally minimal assignment of every target (row) to a distinct query
/// (column). Among optimal assignments the lexicographically smallest
/// sequence of query indices is returned.
pub fn hungarian_assign(cost: &Tensor) -> Result<Assignment> {
    if cost.shape().len() != 2 {
        return Err(Error::dim("hungarian_assign", format!("expected a matrix, got {:?}", cost.shape())));
    }
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows == 0 {
        return Ok(Assignment::empty());
    }
    if rows > cols {
        return Err(Error::Contract(format!("{rows} targets exceed {cols} queries")));
    }
    if !cost.is_finite() {
        return Err(Error::Contract("assignment cost matrix has non-finite entries".into()));
    }
    let c = cost.data();
    let sol = solve(c, rows, cols);
    let best = total(c, cols, &sol.col_of_row);
    let scale = c.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-10 * scale * rows as f64;

    let mut chosen = sol.col_of_row.clone();
    let mut taken = vec![false; cols];
    let mut fixed_cost = 0.0;
    for r in 0..rows {
        // Only tight edges under the optimal potentials can appear in an optimum.
        for k in 0..chosen[r] {
            if taken[k] {
                continue;
            }
            let reduced = c[r * cols + k] - sol.u[r + 1] - sol.v[k + 1];
            if reduced > tol {
                continue;
            }
            taken[k] = true;
            let (rest, cols_rest) = solve_rest(c, rows, cols, r + 1, &taken);
            let candidate = fixed_cost + c[r * cols + k] + rest;
            taken[k] = false;
            if candidate <= best + tol {
                chosen[r] = k;
                chosen[r + 1..].copy_from_slice(&cols_rest);
                break;
            }
        }
        taken[chosen[r]] = true;
        fixed_cost += c[r * cols + chosen[r]];
    }
    Ok(Assignment {
        cost: total(c, cols, &chosen),
        pairs: chosen.into_iter().enumerate().collect(),
    })
}
