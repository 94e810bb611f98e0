//! Minimum-cost perfect matching (Jonker–Volgenant shortest augmenting
//! paths with dual potentials), exact over f64 costs.

use crate::error::{Error, Result};
use crate::math::sub3;

/// Optimal assignment for a dense n x n cost matrix, `cost(i, j)` giving the
/// price of pairing row i with column j. Returns (assignment, total cost)
/// with `assignment[i] = j`.
pub(crate) fn solve(n: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<usize>, f64) {
    // 1-based internally; column 0 is the virtual start column.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (0 = none)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // unwind the augmenting path
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
        total += cost(p[j] - 1, j - 1);
    }
    (assignment, total)
}

/// Optimal pairing of two equal-size point sets under squared Euclidean
/// distance. `assignment[i]` is the index in `q` matched to `p[i]`.
pub fn hungarian_match(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<(Vec<usize>, f64)> {
    if p.len() != q.len() {
        return Err(Error::Argument(format!(
            "hungarian_match: point sets of size {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Ok((vec![], 0.0));
    }
    let n = p.len();
    // dense cost matrix: amortizes the distance evaluations across the solve
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = sub3(p[i], q[j]);
            cost[i * n + j] = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        }
    }
    Ok(solve(n, |i, j| cost[i * n + j]))
}
