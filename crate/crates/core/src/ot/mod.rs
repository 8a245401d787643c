//! Entropic optimal transport between discrete measures.

mod assignment;
mod plan;
mod sinkhorn;

pub use assignment::{
    assignment_bruteforce, assignment_lp, assignment_sorted, round_to_permutation, Assignment, Permutation,
    BRUTE_FORCE_MAX_N,
};
pub use plan::{entropic_objective, entropy, scale_plan, unscale_plan};
pub use sinkhorn::{sinkhorn_solve, sinkhorn_solve_warm};

pub(crate) use sinkhorn::{check_marginals, ScalingState};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};

/// Pairwise transport cost between the rows of two sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(DMatrix<f64>);

impl CostMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(dims("cost matrix must be non-empty"));
        }
        if values.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        Ok(Self(values))
    }

    pub fn from_fn(n: usize, m: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(n, m, f))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(dims("ragged cost rows"));
        }
        Self::from_fn(n, m, |i, j| rows[i][j])
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Largest minus smallest entry.
    pub fn range(&self) -> f64 {
        self.0.max() - self.0.min()
    }

    /// Copy of the matrix with `c` added to every entry.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        Self::new(self.0.add_scalar(c))
    }
}

/// Nonnegative weights on the support points of one side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalWeights(DVector<f64>);

impl MarginalWeights {
    /// Probability weights: nonnegative, finite, summing to one.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMarginal("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMarginal("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 * (weights.len() as f64).max(1.0) {
            return Err(Error::InvalidMarginal(format!("weights sum to {total}, not 1")));
        }
        Ok(Self(DVector::from_vec(weights)))
    }

    pub fn uniform(k: usize) -> Self {
        Self(DVector::from_element(k, 1.0 / k as f64))
    }

    pub(crate) fn from_raw(v: DVector<f64>) -> Self {
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn mass(&self) -> f64 {
        self.0.sum()
    }

    pub fn is_uniform(&self, tol: f64) -> bool {
        let target = self.mass() / self.len() as f64;
        self.0.iter().all(|w| (w - target).abs() <= tol)
    }
}

/// A coupling between row and column points, with the marginals it was
/// solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    entries: DMatrix<f64>,
    row_marginal: MarginalWeights,
    col_marginal: MarginalWeights,
}

impl TransportPlan {
    pub fn new(entries: DMatrix<f64>, row_marginal: MarginalWeights, col_marginal: MarginalWeights) -> Result<Self> {
        if entries.nrows() != row_marginal.len() || entries.ncols() != col_marginal.len() {
            return Err(dims(format!(
                "plan is {}x{} but marginals have {} and {} entries",
                entries.nrows(),
                entries.ncols(),
                row_marginal.len(),
                col_marginal.len()
            )));
        }
        if entries.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::NonFinite("plan entries must be finite and >= 0".into()));
        }
        Ok(Self { entries, row_marginal, col_marginal })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn row_marginal(&self) -> &MarginalWeights {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &MarginalWeights {
        &self.col_marginal
    }

    pub fn row_sums(&self) -> DVector<f64> {
        row_sums(&self.entries)
    }

    pub fn col_sums(&self) -> DVector<f64> {
        col_sums(&self.entries)
    }

    /// Largest absolute deviation of the plan's marginals from the targets.
    pub fn marginal_violation(&self) -> f64 {
        let r = (self.row_sums() - self.row_marginal.as_vector()).amax();
        let c = (self.col_sums() - self.col_marginal.as_vector()).amax();
        r.max(c)
    }

    /// `<C, S>`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> Result<f64> {
        if cost.values().shape() != self.entries.shape() {
            return Err(dims("cost and plan shapes differ"));
        }
        Ok(cost.values().dot(&self.entries))
    }
}

pub fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        out += col;
    }
    out
}

pub fn col_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Dual potentials of the entropic problem. The plan is recovered as
/// `exp((xi_i + zeta_j - C_ij) / epsilon)`, and `p = exp(xi / epsilon)`,
/// `q = exp(zeta / epsilon)` are the matching scalings. The gauge is fixed
/// by `zeta[m - 1] = 0`.
///
/// `p` and `q` can overflow or underflow for small `epsilon`; use the log
/// form for anything quantitative.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub xi: DVector<f64>,
    pub zeta: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub epsilon: f64,
}

impl DualPotentials {
    pub(crate) fn from_log(mut xi: DVector<f64>, mut zeta: DVector<f64>, epsilon: f64) -> Self {
        let last = zeta[zeta.len() - 1];
        if last.is_finite() {
            xi.add_scalar_mut(last);
            zeta.add_scalar_mut(-last);
        }
        let p = xi.map(|x| (x / epsilon).exp());
        let q = zeta.map(|z| (z / epsilon).exp());
        Self { xi, zeta, p, q, epsilon }
    }

    /// Rebuild the plan entries from the potentials for a given cost.
    pub fn reconstruct(&self, cost: &CostMatrix) -> Result<DMatrix<f64>> {
        if cost.nrows() != self.xi.len() || cost.ncols() != self.zeta.len() {
            return Err(dims("cost shape does not match the potentials"));
        }
        let eps = self.epsilon;
        Ok(DMatrix::from_fn(cost.nrows(), cost.ncols(), |i, j| {
            ((self.xi[i] + self.zeta[j] - cost.get(i, j)) / eps).exp()
        }))
    }
}

/// Parameters of the Sinkhorn iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, max_iters: 10_000, tol: 1e-9 }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: TransportPlan,
    pub duals: DualPotentials,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_violation: f64,
}
