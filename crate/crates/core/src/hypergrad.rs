//! Gradients of `F(w) = <C(w), S*(w)>` through the entropic OT solution.
//!
//! Both routes first compute the sensitivity `dF/dC` (an `n x m` matrix) by
//! one adjoint solve with the optimality system of the lower-level problem,
//! then contract it with the per-entry cost gradients. Nothing larger than
//! `O((n + m)^2)` is formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{dims, Error, Result};
use crate::models::{CostGradient, ModelParams};
use crate::ot::{col_sums, row_sums, CostMatrix, SinkhornSolution};
use crate::robust::{RobustConfig, RobustSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergradient {
    pub values: DVector<f64>,
}

impl Hypergradient {
    pub fn relative_error(&self, reference: &Hypergradient) -> f64 {
        let denom = reference.values.norm();
        let diff = (&self.values - &reference.values).norm();
        if denom == 0.0 {
            diff
        } else {
            diff / denom
        }
    }
}

/// Linearized marginal constraints of an entropic plan `S` in the potentials
/// `(xi, zeta_1..zeta_{m-1})`, with `zeta_m` pinned to zero:
///
/// ```text
/// M = [ diag(S 1)   S_bar           ]     S_bar = S[:, ..m-1]
///     [ S_bar^T     diag(S^T 1)_bar ]
/// ```
///
/// Solves go through the Cholesky factor of the Schur complement
/// `K = diag(S^T 1)_bar - S_bar^T diag(S 1)^-1 S_bar`.
pub struct ImplicitSystem {
    inv_row: DVector<f64>,
    plan_bar: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl ImplicitSystem {
    pub fn new(plan: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = plan.shape();
        if n == 0 || m == 0 {
            return Err(dims("empty plan"));
        }
        let rows = row_sums(plan);
        let cols = col_sums(plan);
        let inv_row = rows.map(|r| if r > 0.0 { 1.0 / r } else { 0.0 });
        let plan_bar = plan.columns(0, m - 1).into_owned();
        let chol = if m > 1 {
            let mut scaled = plan_bar.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= inv_row[i].sqrt();
            }
            let mut k = -(scaled.transpose() * &scaled);
            for j in 0..m - 1 {
                k[(j, j)] += cols[j];
            }
            let chol = Cholesky::new(k)
                .ok_or_else(|| Error::SingularSystem("Schur complement is not positive definite".into()))?;
            Some(chol)
        } else {
            None
        };
        Ok(Self { inv_row, plan_bar, chol })
    }

    pub fn n(&self) -> usize {
        self.inv_row.len()
    }

    /// Number of free column potentials, `m - 1`.
    pub fn free_cols(&self) -> usize {
        self.plan_bar.ncols()
    }

    /// The Schur complement `K`.
    pub fn kmat(&self) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => {
                let l = c.l();
                &l * l.transpose()
            }
            None => DMatrix::zeros(0, 0),
        }
    }

    /// `M^-1 (a; b)`, returned as `(u, v)` with `u` of length `n`, `v` of length `m - 1`.
    pub fn solve(&self, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let da = a.component_mul(&self.inv_row);
        let v = match &self.chol {
            Some(c) => c.solve(&(b - self.plan_bar.tr_mul(&da))),
            None => DVector::zeros(0),
        };
        let u = (a - &self.plan_bar * &v).component_mul(&self.inv_row);
        (u, v)
    }

    /// Dense blocks `(H1, H2, H3, H4)` of `M^-1`.
    pub fn hinv_blocks(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.n();
        let h4 = match &self.chol {
            Some(c) => c.inverse(),
            None => DMatrix::zeros(0, 0),
        };
        let mut d_plan = self.plan_bar.clone();
        for (i, mut row) in d_plan.row_iter_mut().enumerate() {
            row *= self.inv_row[i];
        }
        let h2 = -(&d_plan * &h4);
        let mut h1 = -(&h2 * d_plan.transpose());
        for i in 0..n {
            h1[(i, i)] += self.inv_row[i];
        }
        let h3 = h2.transpose();
        (h1, h2, h3, h4)
    }
}

fn weighted_cost_sums(cost: &DMatrix<f64>, plan: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let cs = cost.component_mul(plan);
    let a = row_sums(&cs);
    let b = col_sums(&cs);
    let m = b.len();
    (a, b.rows(0, m - 1).into_owned())
}

// W_ij = S_ij (1 - C_ij / eps + (u_i + v_j) / eps) with v_m = 0.
fn sensitivity(cost: &DMatrix<f64>, plan: &DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let m = plan.ncols();
    DMatrix::from_fn(plan.nrows(), m, |i, j| {
        let vj = if j + 1 < m { v[j] } else { 0.0 };
        plan[(i, j)] * (1.0 - cost[(i, j)] / eps + (u[i] + vj) / eps)
    })
}

fn check_shapes(cost: &CostMatrix, plan: &DMatrix<f64>) -> Result<()> {
    if cost.values().shape() != plan.shape() {
        return Err(dims(format!(
            "cost is {}x{} but the plan is {}x{}",
            cost.nrows(),
            cost.ncols(),
            plan.nrows(),
            plan.ncols()
        )));
    }
    Ok(())
}

/// `dF/dC` for `F = <C, S*(C)>` at an exact-marginal Sinkhorn solution.
pub fn exact_cost_sensitivity(cost: &CostMatrix, sol: &SinkhornSolution, epsilon: f64) -> Result<DMatrix<f64>> {
    if !sol.converged {
        return Err(Error::NotConverged { violation: sol.marginal_violation });
    }
    plan_sensitivity(cost, sol.plan.entries(), epsilon)
}

// Same as `exact_cost_sensitivity` without the convergence check; trainers
// use it to keep going on inner solves that stopped slightly short.
pub(crate) fn plan_sensitivity(cost: &CostMatrix, plan: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    check_shapes(cost, plan)?;
    let sys = ImplicitSystem::new(plan)?;
    let (a, b) = weighted_cost_sums(cost.values(), plan);
    let (u, v) = sys.solve(&a, &b);
    Ok(sensitivity(cost.values(), plan, &u, &v, epsilon))
}

fn contract<G: CostGradient + ?Sized>(grad: &G, w: &DMatrix<f64>) -> Result<Hypergradient> {
    let values = grad.contract(w);
    if values.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("hypergradient".into()));
    }
    Ok(Hypergradient { values })
}

/// Gradient of `w -> <C(w), S*(w)>` where `S*` is the entropic plan with
/// fixed marginals.
pub fn exact_hypergradient<G: CostGradient + ?Sized>(
    cost: &CostMatrix,
    grad: &G,
    sol: &SinkhornSolution,
    epsilon: f64,
) -> Result<Hypergradient> {
    let w = exact_cost_sensitivity(cost, sol, epsilon)?;
    contract(grad, &w)
}

/// Multipliers of one relaxed side: `lambda_sum` for the simplex constraint and
/// `lambda_ball` for the ball (zero when the ball is inactive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideMultipliers {
    pub lambda_sum: f64,
    pub lambda_ball: f64,
    pub ball_active: bool,
}

/// Estimates the multipliers from stationarity
/// `s_i + lambda_sum + 2 lambda_ball (bar_i - nominal_i) = 0`,
/// `s = potential + entropy_weight * log bar`, by summing the equations over the
/// two halves `[0, ceil(k/2))` and `[ceil(k/2), k)` and solving the 2x2 system.
/// Falls back to least squares when that system is ill-conditioned.
pub fn estimate_multipliers(
    potential: &DVector<f64>,
    bar: &DVector<f64>,
    nominal: &DVector<f64>,
    entropy_weight: f64,
    rho: f64,
) -> SideMultipliers {
    let k = bar.len();
    let s = DVector::from_fn(k, |i, _| {
        let log = if entropy_weight > 0.0 { entropy_weight * bar[i].max(1e-300).ln() } else { 0.0 };
        potential[i] + log
    });
    let d = bar - nominal;
    let on_sphere = rho > 0.0 && d.norm_squared() >= rho * (1.0 - 1e-9);
    if !on_sphere {
        return SideMultipliers { lambda_sum: -s.mean(), lambda_ball: 0.0, ball_active: false };
    }
    let half = k.div_ceil(2);
    let (n1, n2) = (half as f64, (k - half) as f64);
    let (d1, d2) = (d.rows(0, half).sum(), d.rows(half, k - half).sum());
    let (s1, s2) = (s.rows(0, half).sum(), s.rows(half, k - half).sum());
    let det = 2.0 * (n1 * d2 - n2 * d1);
    let scale = 2.0 * k as f64 * d.abs().sum();
    let (mut lambda_sum, mut lambda_ball) = if det.abs() > 1e-8 * scale {
        ((-s1 * 2.0 * d2 + s2 * 2.0 * d1) / det, (-n1 * s2 + n2 * s1) / det)
    } else {
        let sc = s.add_scalar(-s.mean());
        let dd = d.norm_squared();
        let lb = if dd > 0.0 { -sc.dot(&d) / (2.0 * dd) } else { 0.0 };
        (-s.mean() - 2.0 * lb * d.mean(), lb)
    };
    if lambda_ball <= 0.0 {
        lambda_ball = 0.0;
        lambda_sum = -s.mean();
    }
    SideMultipliers { lambda_sum, lambda_ball, ball_active: lambda_ball > 0.0 }
}

/// Multipliers for both sides of a robust solution; `None` for a pinned side.
pub fn robust_multipliers(
    sol: &RobustSolution,
    cfg: &RobustConfig,
) -> (Option<SideMultipliers>, Option<SideMultipliers>) {
    let mu = (cfg.rho1 > 0.0).then(|| {
        estimate_multipliers(&sol.duals.xi, sol.mu_bar.as_vector(), sol.mu.as_vector(), cfg.epsilon1, cfg.rho1)
    });
    let nu = (cfg.rho2 > 0.0).then(|| {
        estimate_multipliers(&sol.duals.zeta, sol.nu_bar.as_vector(), sol.nu.as_vector(), cfg.epsilon2, cfg.rho2)
    });
    (mu, nu)
}

/// `dF/dC` for `F = <C, S_r*(C)>` at a relaxed-marginal solution.
///
/// The KKT system in `(xi, zeta_bar, mu_bar, nu_bar, multipliers)` is
/// eliminated down to the marginal block: with `M` the exact-case system,
/// `N = Lambda + eps E^T M^-1 E` is solved jointly with the active constraint
/// normals, and the potential adjoints are recovered from `M^-1`. A side with
/// `rho = 0` is held at its nominal marginal.
pub fn robust_cost_sensitivity(cost: &CostMatrix, sol: &RobustSolution, cfg: &RobustConfig) -> Result<DMatrix<f64>> {
    if !sol.converged {
        return Err(Error::NotConverged { violation: sol.marginal_violation });
    }
    robust_plan_sensitivity(cost, sol, cfg)
}

pub(crate) fn robust_plan_sensitivity(
    cost: &CostMatrix,
    sol: &RobustSolution,
    cfg: &RobustConfig,
) -> Result<DMatrix<f64>> {
    let plan = sol.plan.entries();
    check_shapes(cost, plan)?;
    let (n, m) = plan.shape();
    let eps = cfg.epsilon;
    let sys = ImplicitSystem::new(plan)?;
    let (a, b) = weighted_cost_sums(cost.values(), plan);
    let (u0, v0) = sys.solve(&a, &b);

    let (mult_mu, mult_nu) = robust_multipliers(sol, cfg);
    if mult_mu.is_none() && mult_nu.is_none() {
        return Ok(sensitivity(cost.values(), plan, &u0, &v0, eps));
    }

    // Layout of the marginal block: [mu_bar (n) if free][nu_bar (m) if free].
    let mu_off = 0;
    let nu_off = if mult_mu.is_some() { n } else { 0 };
    let q = nu_off + if mult_nu.is_some() { m } else { 0 };
    let (h1, h2, _, h4) = sys.hinv_blocks();

    let mut normals: Vec<DVector<f64>> = Vec::new();
    let mut nmat = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    if let Some(mult) = mult_mu {
        let bar = sol.mu_bar.as_vector();
        nmat.view_mut((mu_off, mu_off), (n, n)).copy_from(&(&h1 * eps));
        for i in 0..n {
            let ent = if cfg.epsilon1 > 0.0 { cfg.epsilon1 / bar[i].max(1e-300) } else { 0.0 };
            nmat[(mu_off + i, mu_off + i)] += 2.0 * mult.lambda_ball + ent;
            rhs[mu_off + i] = eps * u0[i];
        }
        let mut sum = DVector::zeros(q);
        sum.rows_mut(mu_off, n).fill(1.0);
        normals.push(sum);
        if mult.ball_active {
            let mut ball = DVector::zeros(q);
            ball.rows_mut(mu_off, n).copy_from(&((bar - sol.mu.as_vector()) * 2.0));
            normals.push(ball);
        }
    }
    if let Some(mult) = mult_nu {
        let bar = sol.nu_bar.as_vector();
        nmat.view_mut((nu_off, nu_off), (m - 1, m - 1)).copy_from(&(&h4 * eps));
        if mult_mu.is_some() {
            nmat.view_mut((mu_off, nu_off), (n, m - 1)).copy_from(&(&h2 * eps));
            nmat.view_mut((nu_off, mu_off), (m - 1, n)).copy_from(&(h2.transpose() * eps));
        }
        for j in 0..m {
            let ent = if cfg.epsilon2 > 0.0 { cfg.epsilon2 / bar[j].max(1e-300) } else { 0.0 };
            nmat[(nu_off + j, nu_off + j)] += 2.0 * mult.lambda_ball + ent;
            if j + 1 < m {
                rhs[nu_off + j] = eps * v0[j];
            }
        }
        let mut sum = DVector::zeros(q);
        sum.rows_mut(nu_off, m).fill(1.0);
        normals.push(sum);
        if mult.ball_active {
            let mut ball = DVector::zeros(q);
            ball.rows_mut(nu_off, m).copy_from(&((bar - sol.nu.as_vector()) * 2.0));
            normals.push(ball);
        }
    }

    let k = normals.len();
    let mut saddle = DMatrix::zeros(q + k, q + k);
    saddle.view_mut((0, 0), (q, q)).copy_from(&nmat);
    for (c, normal) in normals.iter().enumerate() {
        saddle.view_mut((0, q + c), (q, 1)).copy_from(normal);
        saddle.view_mut((q + c, 0), (1, q)).copy_from(&normal.transpose());
    }
    let mut full_rhs = DVector::zeros(q + k);
    full_rhs.rows_mut(0, q).copy_from(&rhs);
    let y = saddle.lu().solve(&full_rhs).ok_or_else(|| Error::SingularSystem("relaxed-marginal KKT block".into()))?;

    let ey_mu = if mult_mu.is_some() { y.rows(mu_off, n).into_owned() } else { DVector::zeros(n) };
    let ey_nu = if mult_nu.is_some() { y.rows(nu_off, m - 1).into_owned() } else { DVector::zeros(m - 1) };
    let (tu, tv) = sys.solve(&ey_mu, &ey_nu);
    // Potential adjoints are eps (t - (u0, v0)); the sensitivity uses
    // -(adjoint) / eps^2 = ((u0, v0) - t) / eps.
    let u = &u0 - tu;
    let v = &v0 - tv;
    let w = sensitivity(cost.values(), plan, &u, &v, eps);
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("robust sensitivity".into()));
    }
    Ok(w)
}

/// Gradient of `w -> <C(w), S_r*(w)>` with relaxed marginals.
pub fn robust_hypergradient<G: CostGradient + ?Sized>(
    cost: &CostMatrix,
    grad: &G,
    sol: &RobustSolution,
    cfg: &RobustConfig,
) -> Result<Hypergradient> {
    let w = robust_cost_sensitivity(cost, sol, cfg)?;
    contract(grad, &w)
}

/// Central differences `(f(w + h e_k) - f(w - h e_k)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(mut objective: F, params: &ModelParams, h: f64) -> Result<Hypergradient>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be > 0, got {h}")));
    }
    let mut values = DVector::zeros(params.len());
    let mut probe = params.clone();
    for k in 0..params.len() {
        probe.w[k] = params.w[k] + h;
        let up = objective(&probe)?;
        probe.w[k] = params.w[k] - h;
        let down = objective(&probe)?;
        probe.w[k] = params.w[k];
        values[k] = (up - down) / (2.0 * h);
    }
    Ok(Hypergradient { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{cost_matrix, ModelKind, ShuffledDataset, SquaredResidualCost};
    use crate::ot::{sinkhorn_solve, MarginalWeights, SinkhornConfig};
    use crate::robust::robust_solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    struct NoGradient(usize);

    impl CostGradient for NoGradient {
        fn dim(&self) -> usize {
            self.0
        }

        fn contract(&self, _: &DMatrix<f64>) -> DVector<f64> {
            DVector::zeros(self.0)
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn instance(n: usize, m: usize, d: usize, e: usize, kind: ModelKind, seed: u64) -> (ShuffledDataset, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, n, d);
        let z = gaussian(&mut rng, m, e);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = ShuffledDataset::new(x, y, z, None).unwrap();
        let w = DVector::from_fn(d + e, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
        (data, ModelParams::new(kind, w))
    }

    fn exact_objective(data: &ShuffledDataset, eps: f64) -> impl Fn(&ModelParams) -> Result<f64> + '_ {
        move |p| {
            let c = cost_matrix(p, data)?;
            let (n, m) = (data.n(), data.m());
            let cfg = SinkhornConfig::new(eps).with_tol(1e-13).with_max_iters(100_000);
            let s = sinkhorn_solve(&c, &MarginalWeights::uniform(n), &MarginalWeights::uniform(m), &cfg)?;
            s.plan.transport_cost(&c)
        }
    }

    fn exact_grad(data: &ShuffledDataset, params: &ModelParams, eps: f64) -> Hypergradient {
        let model = SquaredResidualCost::new(params, data).unwrap();
        let c = model.cost_matrix().unwrap();
        let cfg = SinkhornConfig::new(eps).with_tol(1e-13).with_max_iters(100_000);
        let (n, m) = (data.n(), data.m());
        let sol = sinkhorn_solve(&c, &MarginalWeights::uniform(n), &MarginalWeights::uniform(m), &cfg).unwrap();
        exact_hypergradient(&c, &model, &sol, eps).unwrap()
    }

    #[test]
    fn finite_difference_examples() {
        let p = ModelParams::new(ModelKind::Linear, DVector::from_vec(vec![1.0, 2.0]));
        let g = finite_difference_gradient(|q| Ok(q.w.norm_squared()), &p, 1e-6).unwrap();
        assert!((g.values[0] - 2.0).abs() < 1e-6 && (g.values[1] - 4.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_| Ok(3.0), &p, 1e-6).unwrap();
        assert_eq!(g.values, DVector::zeros(2));
        let z = ModelParams::zeros(ModelKind::Linear, 1);
        let g = finite_difference_gradient(|q| Ok(q.w[0].sin()), &z, 1e-5).unwrap();
        assert!((g.values[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        for (n, m, eps, seed) in [(20, 20, 0.1, 1), (7, 5, 1.0, 2), (6, 6, 0.05, 3)] {
            let (data, params) = instance(n, m, 2, 5, ModelKind::Linear, seed);
            let g = exact_grad(&data, &params, eps);
            let fd = finite_difference_gradient(exact_objective(&data, eps), &params, 1e-5).unwrap();
            let err = g.relative_error(&fd);
            assert!(err < 1e-4, "n={n} m={m} eps={eps}: {err:e}");
        }
    }

    #[test]
    fn constant_cost_has_zero_gradient() {
        let c = CostMatrix::from_fn(4, 4, |i, j| (i * j) as f64 * 0.1).unwrap();
        let u = MarginalWeights::uniform(4);
        let sol = sinkhorn_solve(&c, &u, &u, &SinkhornConfig::new(0.5)).unwrap();
        let g = exact_hypergradient(&c, &NoGradient(3), &sol, 0.5).unwrap();
        assert_eq!(g.values, DVector::zeros(3));
    }

    #[test]
    fn single_point_gradient_is_direct_term() {
        let (data, params) = instance(1, 1, 1, 2, ModelKind::Sine, 4);
        let model = SquaredResidualCost::new(&params, &data).unwrap();
        let g = exact_grad(&data, &params, 0.3);
        let direct = model.contract(&DMatrix::from_element(1, 1, 1.0));
        assert!((g.values - direct).amax() < 1e-12);
    }

    #[test]
    fn gradient_is_shift_covariant() {
        let (data, params) = instance(8, 8, 0, 3, ModelKind::Linear, 5);
        let model = SquaredResidualCost::new(&params, &data).unwrap();
        let c = model.cost_matrix().unwrap();
        let u = MarginalWeights::uniform(8);
        let cfg = SinkhornConfig::new(0.2).with_tol(1e-12);
        let base = exact_hypergradient(&c, &model, &sinkhorn_solve(&c, &u, &u, &cfg).unwrap(), 0.2).unwrap();
        let c2 = c.shifted(3.0).unwrap();
        let shifted = exact_hypergradient(&c2, &model, &sinkhorn_solve(&c2, &u, &u, &cfg).unwrap(), 0.2).unwrap();
        assert!((base.values - shifted.values).amax() < 1e-8);
    }

    #[test]
    fn unconverged_solution_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = CostMatrix::from_fn(5, 5, |_, _| rng.random::<f64>()).unwrap();
        let u = MarginalWeights::uniform(5);
        let sol = sinkhorn_solve(&c, &u, &u, &SinkhornConfig::new(0.01).with_max_iters(1)).unwrap();
        assert!(!sol.converged);
        let err = exact_hypergradient(&c, &NoGradient(1), &sol, 0.01);
        assert!(matches!(err, Err(Error::NotConverged { .. })));
    }

    #[test]
    fn implicit_system_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = DMatrix::from_fn(5, 4, |_, _| rng.random::<f64>() + 0.1);
        let sys = ImplicitSystem::new(&plan).unwrap();
        let (n, m) = (5, 4);
        let mut dense = DMatrix::zeros(n + m - 1, n + m - 1);
        let (r, c) = (row_sums(&plan), col_sums(&plan));
        for i in 0..n {
            dense[(i, i)] = r[i];
            for j in 0..m - 1 {
                dense[(i, n + j)] = plan[(i, j)];
                dense[(n + j, i)] = plan[(i, j)];
            }
        }
        for j in 0..m - 1 {
            dense[(n + j, n + j)] = c[j];
        }
        let inv = dense.clone().try_inverse().unwrap();
        let (h1, h2, h3, h4) = sys.hinv_blocks();
        assert!((inv.view((0, 0), (n, n)) - h1).amax() < 1e-10);
        assert!((inv.view((0, n), (n, m - 1)) - h2).amax() < 1e-10);
        assert!((inv.view((n, 0), (m - 1, n)) - h3).amax() < 1e-10);
        assert!((inv.view((n, n), (m - 1, m - 1)) - h4).amax() < 1e-10);
        let rhs = DVector::from_fn(n + m - 1, |i, _| i as f64 - 2.0);
        let (u, v) = sys.solve(&rhs.rows(0, n).into_owned(), &rhs.rows(n, m - 1).into_owned());
        let want = &inv * &rhs;
        assert!((want.rows(0, n) - u).amax() < 1e-10 && (want.rows(n, m - 1) - v).amax() < 1e-10);
    }

    fn robust_cfg(rho: f64) -> RobustConfig {
        let mut cfg = RobustConfig::new(0.5, rho, rho);
        cfg.epsilon1 = 0.1;
        cfg.epsilon2 = 0.1;
        cfg.eta = 0.1;
        cfg.outer_iters = 3000;
        cfg.tol = 1e-9;
        cfg
    }

    /// KKT residual of the relaxed problem in the variables
    /// `(xi, zeta_bar, mu_bar, nu_bar, lambda_sum_mu, lambda_ball_mu,
    /// lambda_sum_nu, lambda_ball_nu)` with `zeta_m = 0` and the ball
    /// equations written as `|bar - nominal|^2 - rho`.
    fn kkt_residual(
        x: &DVector<f64>,
        c: &DMatrix<f64>,
        mu: &DVector<f64>,
        nu: &DVector<f64>,
        cfg: &RobustConfig,
        active: (bool, bool),
    ) -> DVector<f64> {
        let (n, m) = c.shape();
        let eps = cfg.epsilon;
        let xi = x.rows(0, n);
        let zeta = |j: usize| if j + 1 < m { x[n + j] } else { 0.0 };
        let mb = x.rows(n + m - 1, n);
        let nb = x.rows(2 * n + m - 1, m);
        let l = x.rows(2 * n + 2 * m - 1, 4);
        let s = DMatrix::from_fn(n, m, |i, j| ((xi[i] + zeta(j) - c[(i, j)]) / eps).exp());
        let mut r = DVector::zeros(x.len());
        for i in 0..n {
            r[i] = mb[i] - s.row(i).sum();
            r[n + m - 1 + i] = xi[i] + l[0] + 2.0 * l[1] * (mb[i] - mu[i]) + cfg.epsilon1 * mb[i].ln();
        }
        for j in 0..m {
            if j + 1 < m {
                r[n + j] = nb[j] - s.column(j).sum();
            }
            r[2 * n + m - 1 + j] = zeta(j) + l[2] + 2.0 * l[3] * (nb[j] - nu[j]) + cfg.epsilon2 * nb[j].ln();
        }
        let o = 2 * n + 2 * m - 1;
        r[o] = mb.sum() - 1.0;
        r[o + 1] = if active.0 { (mb - mu).norm_squared() - cfg.rho1 } else { l[1] };
        r[o + 2] = nb.sum() - 1.0;
        r[o + 3] = if active.1 { (nb - nu).norm_squared() - cfg.rho2 } else { l[3] };
        r
    }

    #[test]
    fn robust_sensitivity_matches_differentiated_kkt_system() {
        // Small radius: both balls active. Large radius: both inactive.
        kkt_oracle_check(0.002, true);
        kkt_oracle_check(0.5, false);
    }

    fn kkt_oracle_check(rho: f64, expect_active: bool) {
        let (n, m) = (5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 2.0);
        let cost = CostMatrix::new(c.clone()).unwrap();
        let cfg = robust_cfg(rho);
        let (mu, nu) = (MarginalWeights::uniform(n), MarginalWeights::uniform(m));
        let sol = robust_solve(&cost, &mu, &nu, &cfg).unwrap();
        assert!(sol.converged);
        let (lm, ln) = robust_multipliers(&sol, &cfg);
        let (lm, ln) = (lm.unwrap(), ln.unwrap());
        assert_eq!((lm.ball_active, ln.ball_active), (expect_active, expect_active));

        let mut x = DVector::zeros(2 * n + 2 * m + 3);
        x.rows_mut(0, n).copy_from(&sol.duals.xi);
        x.rows_mut(n, m - 1).copy_from(&sol.duals.zeta.rows(0, m - 1));
        x.rows_mut(n + m - 1, n).copy_from(sol.mu_bar.as_vector());
        x.rows_mut(2 * n + m - 1, m).copy_from(sol.nu_bar.as_vector());
        let o = 2 * n + 2 * m - 1;
        x[o] = lm.lambda_sum;
        x[o + 1] = lm.lambda_ball;
        x[o + 2] = ln.lambda_sum;
        x[o + 3] = ln.lambda_ball;
        let active = (lm.ball_active, ln.ball_active);
        let res = |x: &DVector<f64>, c: &DMatrix<f64>| kkt_residual(x, c, mu.as_vector(), nu.as_vector(), &cfg, active);
        assert!(res(&x, &c).amax() < 1e-6, "KKT residual {:e}", res(&x, &c).amax());

        let h = 1e-6;
        let dim = x.len();
        let mut jac = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            jac.set_column(k, &((res(&xp, &c) - res(&xm, &c)) / (2.0 * h)));
        }
        // F(x, C) = sum C_ij exp((xi_i + zeta_j - C_ij) / eps).
        let eps = cfg.epsilon;
        let f = |x: &DVector<f64>, c: &DMatrix<f64>| {
            let mut t = 0.0;
            for i in 0..n {
                for j in 0..m {
                    let z = if j + 1 < m { x[n + j] } else { 0.0 };
                    t += c[(i, j)] * ((x[i] + z - c[(i, j)]) / eps).exp();
                }
            }
            t
        };
        let mut df_dx = DVector::zeros(dim);
        for k in 0..dim {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            df_dx[k] = (f(&xp, &c) - f(&xm, &c)) / (2.0 * h);
        }
        let adj = jac.transpose().lu().solve(&df_dx).unwrap();
        let mut want = DMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let (mut cp, mut cm) = (c.clone(), c.clone());
                cp[(i, j)] += h;
                cm[(i, j)] -= h;
                let direct = (f(&x, &cp) - f(&x, &cm)) / (2.0 * h);
                let dr = (res(&x, &cp) - res(&x, &cm)) / (2.0 * h);
                want[(i, j)] = direct - adj.dot(&dr);
            }
        }
        let got = robust_cost_sensitivity(&cost, &sol, &cfg).unwrap();
        let err = (&got - &want).norm() / want.norm();
        assert!(err < 1e-5, "relative error {err:e}");
    }

    #[test]
    fn robust_gradient_matches_finite_differences() {
        let (data, params) = instance(6, 4, 1, 2, ModelKind::Sine, 12);
        let cfg = robust_cfg(0.05);
        let (mu, nu) = (MarginalWeights::uniform(6), MarginalWeights::uniform(4));
        let objective = |p: &ModelParams| {
            let c = cost_matrix(p, &data)?;
            robust_solve(&c, &mu, &nu, &cfg)?.plan.transport_cost(&c)
        };
        let model = SquaredResidualCost::new(&params, &data).unwrap();
        let c = model.cost_matrix().unwrap();
        let sol = robust_solve(&c, &mu, &nu, &cfg).unwrap();
        let g = robust_hypergradient(&c, &model, &sol, &cfg).unwrap();
        let fd = finite_difference_gradient(objective, &params, 1e-5).unwrap();
        let err = g.relative_error(&fd);
        assert!(err < 1e-3, "relative error {err:e}");
    }

    #[test]
    fn robust_reduces_to_exact_when_pinned() {
        let (data, params) = instance(6, 6, 1, 2, ModelKind::Linear, 13);
        let model = SquaredResidualCost::new(&params, &data).unwrap();
        let c = model.cost_matrix().unwrap();
        let mut cfg = RobustConfig::new(0.3, 0.0, 0.0);
        cfg.epsilon1 = 0.0;
        cfg.epsilon2 = 0.0;
        cfg.outer_iters = 5000;
        cfg.tol = 1e-11;
        let u = MarginalWeights::uniform(6);
        let r = robust_solve(&c, &u, &u, &cfg).unwrap();
        let gr = robust_hypergradient(&c, &model, &r, &cfg).unwrap();
        let s = sinkhorn_solve(&c, &u, &u, &SinkhornConfig::new(0.3).with_tol(1e-12)).unwrap();
        let ge = exact_hypergradient(&c, &model, &s, 0.3).unwrap();
        assert!(gr.relative_error(&ge) < 1e-6);
        let zero = robust_hypergradient(&c, &NoGradient(3), &r, &cfg).unwrap();
        assert_eq!(zero.values, DVector::zeros(3));
    }
}
