//! Square linear assignment by shortest augmenting paths (the core of the
//! Jonker-Volgenant method), with a lexicographic tie-break among optima.

use serde::{Deserialize, Serialize};

use crate::error::{PpnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `permutation[j]` is the column matched to row `j`.
    pub permutation: Vec<usize>,
    /// `sum_j cost[j][permutation[j]]`, accumulated in row order.
    pub total_cost: f64,
}

/// Minimum total cost of assigning `rows` to `cols` (equal lengths) and
/// the column chosen for each row, in the order of `rows`.
fn shortest_augmenting_path(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    // 1-based potentials; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = c(i0, j) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let mut assigned = vec![0usize; n];
    for j in 1..=n {
        assigned[owner[j] - 1] = cols[j - 1];
    }
    let total = (0..n).map(|i| cost[rows[i]][assigned[i]]).sum();
    (total, assigned)
}

/// Optimal assignment of old prototype slots (rows) to new candidates
/// (columns). Among optimal permutations the lexicographically smallest is
/// returned: rows are fixed in order, each to the smallest column that still
/// admits an optimal completion.
pub fn match_prototypes(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let k = cost.len();
    if cost.iter().any(|row| row.len() != k) {
        return Err(PpnError::Contract("assignment cost matrix must be square".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(PpnError::Contract("assignment cost matrix must be finite".into()));
    }
    let all: Vec<usize> = (0..k).collect();
    let (optimum, _) = shortest_augmenting_path(cost, &all, &all);
    let scale: f64 = 1.0 + cost.iter().flatten().map(|c| c.abs()).fold(0.0, f64::max) * k as f64;
    let tol = 1e-12 * scale;

    let mut permutation = Vec::with_capacity(k);
    let mut free: Vec<usize> = all.clone();
    let mut fixed = 0.0;
    for i in 0..k {
        let rest: Vec<usize> = (i + 1..k).collect();
        let mut chosen = None;
        for (pos, &col) in free.iter().enumerate() {
            let remaining: Vec<usize> = free.iter().copied().filter(|&c| c != col).collect();
            let (tail, _) = shortest_augmenting_path(cost, &rest, &remaining);
            if fixed + cost[i][col] + tail <= optimum + tol || pos + 1 == free.len() {
                chosen = Some(pos);
                break;
            }
        }
        let col = free.remove(chosen.expect("some column completes an optimum"));
        fixed += cost[i][col];
        permutation.push(col);
    }
    let total_cost = permutation.iter().enumerate().map(|(j, &c)| cost[j][c]).sum();
    Ok(AssignmentResult { permutation, total_cost })
}
