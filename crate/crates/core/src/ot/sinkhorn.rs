use nalgebra::{DMatrix, DVector};

use super::{CostMatrix, DualPotentials, MarginalWeights, SinkhornConfig, SinkhornSolution, TransportPlan};
use crate::error::{dims, Error, Result};

// Scalings outside this window are folded into the log potentials. The window
// is narrower than the representable range so that u_i * K_ij * v_j cannot
// overflow before the product is formed.
const SCALE_MAX: f64 = 1e100;
const SCALE_MIN: f64 = 1e-100;

/// Sinkhorn scaling with absorbed log potentials.
///
/// The plan is `u_i * K_ij * v_j` with `K_ij = exp((alpha_i + beta_j - C_ij) / eps)`.
/// Plain multiplicative updates are used while `u`, `v` stay in range; when they
/// leave it, the scalings are absorbed into `alpha`, `beta` and the half-step is
/// redone exactly in the log domain.
pub(crate) struct ScalingState<'c> {
    cost: &'c DMatrix<f64>,
    eps: f64,
    alpha: DVector<f64>,
    beta: DVector<f64>,
    kernel: DMatrix<f64>,
    u: DVector<f64>,
    v: DVector<f64>,
    // K v for the current kernel and v.
    kv: Option<DVector<f64>>,
    pub(crate) absorptions: usize,
}

impl<'c> ScalingState<'c> {
    pub(crate) fn new(cost: &'c DMatrix<f64>, eps: f64, init: Option<(&DVector<f64>, &DVector<f64>)>) -> Self {
        let (n, m) = cost.shape();
        let (alpha, beta) = match init {
            Some((a, b)) if a.len() == n && b.len() == m && a.iter().chain(b.iter()).all(|x| x.is_finite()) => {
                (a.clone(), b.clone())
            }
            _ => (DVector::zeros(n), DVector::zeros(m)),
        };
        let mut state = Self {
            cost,
            eps,
            alpha,
            beta,
            kernel: DMatrix::zeros(n, m),
            u: DVector::from_element(n, 1.0),
            v: DVector::from_element(m, 1.0),
            kv: None,
            absorptions: 0,
        };
        state.refresh_kernel();
        if state.kernel.iter().any(|k| !k.is_finite()) {
            // A stale warm start can overflow the kernel; start cold instead.
            state.alpha.fill(0.0);
            state.beta.fill(0.0);
            state.refresh_kernel();
        }
        state
    }

    fn refresh_kernel(&mut self) {
        let eps = self.eps;
        let n = self.cost.nrows();
        for j in 0..self.cost.ncols() {
            let bj = self.beta[j];
            let c = self.cost.column(j);
            let mut k = self.kernel.column_mut(j);
            for i in 0..n {
                k[i] = ((self.alpha[i] + bj - c[i]) / eps).exp();
            }
        }
        self.kv = None;
    }

    fn absorb(&mut self) {
        let eps = self.eps;
        for (a, u) in self.alpha.iter_mut().zip(self.u.iter()) {
            *a += eps * u.ln();
        }
        for (b, v) in self.beta.iter_mut().zip(self.v.iter()) {
            *b += eps * v.ln();
        }
        self.u.fill(1.0);
        self.v.fill(1.0);
        self.absorptions += 1;
        self.refresh_kernel();
    }

    fn kernel_times_v(&mut self) -> &DVector<f64> {
        if self.kv.is_none() {
            self.kv = Some(&self.kernel * &self.v);
        }
        self.kv.as_ref().unwrap()
    }

    /// Row half-step: make the row sums equal `target`.
    pub(crate) fn update_rows(&mut self, target: &DVector<f64>) -> Result<()> {
        let kv = self.kernel_times_v().clone();
        if let Some(u) = scaled(target, &kv) {
            self.u = u;
            return Ok(());
        }
        self.absorb();
        let lse = self.row_log_sum_exp();
        for i in 0..self.alpha.len() {
            self.alpha[i] = log_target(target[i], self.eps) - lse[i];
        }
        check_potential(&self.alpha, "row potential")?;
        self.refresh_kernel();
        Ok(())
    }

    /// Column half-step: make the column sums equal `target`.
    pub(crate) fn update_cols(&mut self, target: &DVector<f64>) -> Result<()> {
        let ktu = self.kernel.tr_mul(&self.u);
        if let Some(v) = scaled(target, &ktu) {
            self.v = v;
            self.kv = None;
            return Ok(());
        }
        self.absorb();
        let lse = self.col_log_sum_exp();
        for j in 0..self.beta.len() {
            self.beta[j] = log_target(target[j], self.eps) - lse[j];
        }
        check_potential(&self.beta, "column potential")?;
        self.refresh_kernel();
        Ok(())
    }

    // eps * log sum_j exp((beta_j - C_ij) / eps), with u = v = 1.
    fn row_log_sum_exp(&self) -> DVector<f64> {
        let eps = self.eps;
        let (n, m) = self.cost.shape();
        let mut mx = DVector::from_element(n, f64::NEG_INFINITY);
        for j in 0..m {
            let c = self.cost.column(j);
            for i in 0..n {
                mx[i] = mx[i].max(self.beta[j] - c[i]);
            }
        }
        let mut acc = DVector::<f64>::zeros(n);
        for j in 0..m {
            let c = self.cost.column(j);
            for i in 0..n {
                if mx[i].is_finite() {
                    acc[i] += ((self.beta[j] - c[i] - mx[i]) / eps).exp();
                }
            }
        }
        DVector::from_fn(n, |i, _| if mx[i].is_finite() { mx[i] + eps * acc[i].ln() } else { mx[i] })
    }

    fn col_log_sum_exp(&self) -> DVector<f64> {
        let eps = self.eps;
        let n = self.cost.nrows();
        DVector::from_fn(self.cost.ncols(), |j, _| {
            let c = self.cost.column(j);
            let mut mx = f64::NEG_INFINITY;
            for i in 0..n {
                mx = mx.max(self.alpha[i] - c[i]);
            }
            if !mx.is_finite() {
                return mx;
            }
            let mut acc = 0.0;
            for i in 0..n {
                acc += ((self.alpha[i] - c[i] - mx) / eps).exp();
            }
            mx + eps * acc.ln()
        })
    }

    /// Current row sums of the plan.
    pub(crate) fn row_sums(&mut self) -> DVector<f64> {
        let u = self.u.clone();
        self.kernel_times_v().component_mul(&u)
    }

    /// Log potentials `(xi, zeta)` of the current plan, before gauge fixing.
    pub(crate) fn potentials(&self) -> (DVector<f64>, DVector<f64>) {
        let eps = self.eps;
        let xi = DVector::from_fn(self.alpha.len(), |i, _| self.alpha[i] + eps * self.u[i].ln());
        let zeta = DVector::from_fn(self.beta.len(), |j, _| self.beta[j] + eps * self.v[j].ln());
        (xi, zeta)
    }

    pub(crate) fn plan(&self) -> DMatrix<f64> {
        let mut s = self.kernel.clone();
        for (j, mut col) in s.column_iter_mut().enumerate() {
            let vj = self.v[j];
            for (x, u) in col.iter_mut().zip(self.u.iter()) {
                *x *= u * vj;
            }
        }
        s
    }
}

fn scaled(target: &DVector<f64>, denom: &DVector<f64>) -> Option<DVector<f64>> {
    let mut out = DVector::zeros(target.len());
    for i in 0..target.len() {
        if target[i] == 0.0 {
            continue;
        }
        let x = target[i] / denom[i];
        if !(x.is_finite() && (SCALE_MIN..=SCALE_MAX).contains(&x)) {
            return None;
        }
        out[i] = x;
    }
    Some(out)
}

fn log_target(t: f64, eps: f64) -> f64 {
    if t == 0.0 {
        f64::NEG_INFINITY
    } else {
        eps * t.ln()
    }
}

fn check_potential(p: &DVector<f64>, what: &str) -> Result<()> {
    if p.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite(format!("{what} in log-domain Sinkhorn step")));
    }
    Ok(())
}

pub(crate) fn check_marginals(cost: &CostMatrix, mu: &MarginalWeights, nu: &MarginalWeights) -> Result<()> {
    if cost.nrows() != mu.len() || cost.ncols() != nu.len() {
        return Err(dims(format!(
            "cost is {}x{} but marginals have {} and {} entries",
            cost.nrows(),
            cost.ncols(),
            mu.len(),
            nu.len()
        )));
    }
    let (a, b) = (mu.mass(), nu.mass());
    if (a - b).abs() > 1e-9 * a.max(b) {
        return Err(Error::InvalidMarginal(format!("marginal masses differ: {a} vs {b}")));
    }
    Ok(())
}

/// Entropic OT plan `argmin <C, G> + eps <log G, G>` over couplings of `mu`, `nu`.
///
/// Returns with `converged = false` when the marginal violation is still above
/// `cfg.tol` after `cfg.max_iters` sweeps.
pub fn sinkhorn_solve(
    cost: &CostMatrix,
    mu: &MarginalWeights,
    nu: &MarginalWeights,
    cfg: &SinkhornConfig,
) -> Result<SinkhornSolution> {
    sinkhorn_solve_warm(cost, mu, nu, cfg, None)
}

/// [`sinkhorn_solve`] started from previously computed potentials.
pub fn sinkhorn_solve_warm(
    cost: &CostMatrix,
    mu: &MarginalWeights,
    nu: &MarginalWeights,
    cfg: &SinkhornConfig,
    init: Option<&DualPotentials>,
) -> Result<SinkhornSolution> {
    cfg.validate()?;
    check_marginals(cost, mu, nu)?;
    let eps = cfg.epsilon;
    let mut state = ScalingState::new(cost.values(), eps, init.map(|d| (&d.xi, &d.zeta)));

    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        state.update_rows(mu.as_vector())?;
        state.update_cols(nu.as_vector())?;
        iterations = it;
        let violation = (state.row_sums() - mu.as_vector()).amax();
        if violation <= cfg.tol {
            break;
        }
    }

    let entries = state.plan();
    if entries.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("Sinkhorn plan".into()));
    }
    let plan = TransportPlan::new(entries, mu.clone(), nu.clone())?;
    let marginal_violation = plan.marginal_violation();
    let (xi, zeta) = state.potentials();
    log::trace!("sinkhorn: {iterations} sweeps, {} absorptions, violation {marginal_violation:.2e}", state.absorptions);
    Ok(SinkhornSolution {
        plan,
        duals: DualPotentials::from_log(xi, zeta, eps),
        iterations,
        converged: marginal_violation <= cfg.tol,
        marginal_violation,
    })
}
