use std::ops::Deref;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{CostMatrix, TransportPlan};
use crate::error::{dims, Error, Result};

/// Largest size accepted by [`assignment_bruteforce`].
pub const BRUTE_FORCE_MAX_N: usize = 9;

/// A bijection of `0..n`; entry `i` is the column matched to row `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &j in &map {
            if j >= map.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidConfig(format!("{map:?} is not a permutation")));
            }
        }
        Ok(Self(map))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        Self(inv)
    }

    /// 0/1 matrix with a one at `(i, perm[i])`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.0.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, &j) in self.0.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }

    /// `sum_i C[i, perm[i]]`, accumulated in row order.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.0.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
    }
}

impl Deref for Permutation {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Permutation,
    pub cost: f64,
}

fn square(cost: &CostMatrix) -> Result<usize> {
    if cost.nrows() != cost.ncols() {
        return Err(dims(format!("assignment needs a square cost, got {}x{}", cost.nrows(), cost.ncols())));
    }
    Ok(cost.nrows())
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive search over all permutations. Among equal costs the
/// lexicographically smallest permutation wins.
pub fn assignment_bruteforce(cost: &CostMatrix) -> Result<Assignment> {
    let n = square(cost)?;
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::TooLarge { n, max: BRUTE_FORCE_MAX_N });
    }
    let mut p: Vec<usize> = (0..n).collect();
    let mut best = p.clone();
    let mut best_cost = Permutation(p.clone()).cost(cost);
    while next_permutation(&mut p) {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&p);
        }
    }
    Ok(Assignment { perm: Permutation(best), cost: best_cost })
}

/// Exact linear assignment by shortest augmenting paths with dual potentials,
/// O(n^3).
pub fn assignment_lp(cost: &CostMatrix) -> Result<Assignment> {
    let n = square(cost)?;
    let c = cost.values();
    // 1-based: index 0 is a virtual column used as the path root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
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
                let reduced = c[(i0 - 1, j - 1)] - u[i0] - v[j];
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
        while j0 != 0 {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    let perm = Permutation(perm);
    let total = perm.cost(cost);
    Ok(Assignment { perm, cost: total })
}

/// Optimal assignment for costs `C_ij = phi(a_i - b_j)` with `phi` convex,
/// such as the squared residual between labels and predictions: matching
/// sorted `a` to sorted `b` is optimal. Ties are broken by index.
pub fn assignment_sorted(a: &[f64], b: &[f64]) -> Result<Permutation> {
    if a.len() != b.len() {
        return Err(dims(format!("{} labels vs {} predictions", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sorted assignment input".into()));
    }
    let order = |x: &[f64]| {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
        idx
    };
    let (ia, ib) = (order(a), order(b));
    let mut perm = vec![0; a.len()];
    for (&i, &j) in ia.iter().zip(&ib) {
        perm[i] = j;
    }
    Ok(Permutation(perm))
}

/// Greedy rounding: repeatedly take the largest entry whose row and column
/// are both free. Equal entries are visited in row-major order.
pub fn round_to_permutation(plan: &TransportPlan) -> Result<Permutation> {
    let s = plan.entries();
    let n = s.nrows();
    if n != s.ncols() {
        return Err(dims(format!("rounding needs a square plan, got {}x{}", n, s.ncols())));
    }
    let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    cells.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut perm = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    let mut left = n;
    for (i, j) in cells {
        if perm[i] == usize::MAX && !col_used[j] {
            perm[i] = j;
            col_used[j] = true;
            left -= 1;
            if left == 0 {
                break;
            }
        }
    }
    Ok(Permutation(perm))
}
