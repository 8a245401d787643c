//! Entropic OT with relaxed marginals.
//!
//! The marginals `mu_bar`, `nu_bar` may move inside L2 balls of squared radius
//! `rho1`, `rho2` around the nominal `mu`, `nu`, with entropy penalties
//! `epsilon1 h(mu_bar)`, `epsilon2 h(nu_bar)`, `h(v) = sum v log v`. The solver
//! alternates one Sinkhorn sweep with a projected gradient step on each free
//! marginal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{check_marginals, entropy, CostMatrix, DualPotentials, MarginalWeights, ScalingState, TransportPlan};

// Marginal entries are floored here before taking logs or passing them to
// the scaling step, so that a clipped entry cannot produce -inf potentials.
const MASS_FLOOR: f64 = 1e-300;

/// Gradient used for the marginal update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalStep {
    /// `xi + epsilon1 log mu_bar`, centered to zero mean: the derivative of
    /// the objective along the simplex. Fixed points satisfy the KKT
    /// conditions of the relaxed problem.
    #[default]
    DualPotential,
    /// `exp(a / epsilon) + epsilon1 log mu_bar` with `a = exp(xi / epsilon)` the
    /// row scaling, exponent clamped at 300.
    ScalingExponential,
}

/// Geometry of the marginal step and of the projection back onto the
/// feasible set (simplex intersected with the ball). Fixed points of the
/// first two are KKT points of the relaxed problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalProjection {
    /// Step and projection in the metric `diag(mu_bar)`. Stable when some
    /// entries of the optimum are tiny.
    #[default]
    Scaled,
    /// Plain step and Euclidean projection.
    Euclidean,
    /// Plain step, clip at zero, renormalize, then [`project_l2_ball`].
    /// When the clip fires, fixed points need not be KKT points.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub epsilon: f64,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub eta: f64,
    pub outer_iters: usize,
    /// Marginal violation of the final plan below which the solve counts as converged.
    pub tol: f64,
    pub step: MarginalStep,
    #[serde(default)]
    pub projection: MarginalProjection,
}

impl RobustConfig {
    pub fn new(epsilon: f64, rho1: f64, rho2: f64) -> Self {
        Self {
            epsilon,
            epsilon1: 1e-3,
            epsilon2: 1e-3,
            rho1,
            rho2,
            eta: 1e-3,
            outer_iters: 500,
            tol: 1e-6,
            step: MarginalStep::DualPotential,
            projection: MarginalProjection::Scaled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !positive(self.epsilon) || !positive(self.eta) || !positive(self.tol) {
            return Err(Error::InvalidConfig("epsilon, eta and tol must be > 0".into()));
        }
        if ![self.epsilon1, self.epsilon2, self.rho1, self.rho2].into_iter().all(nonneg) {
            return Err(Error::InvalidConfig("epsilon1, epsilon2, rho1 and rho2 must be >= 0".into()));
        }
        if self.outer_iters == 0 {
            return Err(Error::InvalidConfig("outer_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RobustSolution {
    /// Plan with marginals `(mu_bar, nu_bar)`.
    pub plan: TransportPlan,
    pub mu_bar: MarginalWeights,
    pub nu_bar: MarginalWeights,
    /// Nominal marginals the balls are centered on.
    pub mu: MarginalWeights,
    pub nu: MarginalWeights,
    pub duals: DualPotentials,
    pub converged: bool,
    pub marginal_violation: f64,
}

/// `v` if it lies within squared distance `rho` of `center`, otherwise its
/// radial projection onto that sphere.
pub fn project_l2_ball(v: &DVector<f64>, center: &DVector<f64>, rho: f64) -> DVector<f64> {
    let diff = v - center;
    let dist2 = diff.norm_squared();
    if dist2 <= rho {
        return v.clone();
    }
    if rho == 0.0 {
        return center.clone();
    }
    center + diff * (rho.sqrt() / dist2.sqrt())
}

/// `argmin sum_i w_i (y_i - v_i)^2` over the probability simplex intersected
/// with `{y : |y - center|^2 <= rho}`, for positive weights `w` and a
/// `center` in the simplex.
///
/// For a ball multiplier `beta` the minimizer is
/// `y_i = max(0, (w_i v_i + beta c_i - tau) / (w_i + beta))` with `tau` fixing
/// the sum; `beta` is the root of `|y - c|^2 = rho`, found by Illinois
/// regula falsi on a bracket.
pub fn project_simplex_ball_weighted(
    v: &DVector<f64>,
    w: &DVector<f64>,
    center: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    let gap = |beta: f64| {
        let y = simplex_piece(v, w, center, beta);
        let g = (&y - center).norm_squared() - rho;
        (y, g)
    };
    let (first, g0) = gap(0.0);
    if g0 <= 0.0 {
        return first;
    }
    if rho == 0.0 {
        return center.clone();
    }
    let (mut lo, mut glo) = (0.0, g0);
    let mut hi = w.max().max(1.0);
    let (mut best, mut ghi) = gap(hi);
    while ghi > 0.0 {
        (lo, glo) = (hi, ghi);
        hi *= 4.0;
        if hi > 1e300 {
            return center.clone();
        }
        (best, ghi) = gap(hi);
    }
    let mut gbest = ghi;
    let mut side = 0;
    for _ in 0..200 {
        if gbest >= -1e-12 * rho || hi - lo <= 1e-15 * hi {
            break;
        }
        let mut mid = hi - ghi * (hi - lo) / (ghi - glo);
        if !(mid > lo && mid < hi) {
            mid = 0.5 * (lo + hi);
        }
        let (y, g) = gap(mid);
        if g <= 0.0 {
            (hi, ghi, gbest, best) = (mid, g, g, y);
            if side == -1 {
                glo *= 0.5;
            }
            side = -1;
        } else {
            (lo, glo) = (mid, g);
            if side == 1 {
                ghi *= 0.5;
            }
            side = 1;
        }
    }
    best
}

/// [`project_simplex_ball_weighted`] with unit weights.
pub fn project_simplex_ball(v: &DVector<f64>, center: &DVector<f64>, rho: f64) -> DVector<f64> {
    project_simplex_ball_weighted(v, &DVector::from_element(v.len(), 1.0), center, rho)
}

fn simplex_piece(v: &DVector<f64>, w: &DVector<f64>, center: &DVector<f64>, beta: f64) -> DVector<f64> {
    let k = v.len();
    let a = DVector::from_fn(k, |i, _| (w[i] * v[i] + beta * center[i]) / (w[i] + beta));
    let b = DVector::from_fn(k, |i, _| 1.0 / (w[i] + beta));
    let brk = DVector::from_fn(k, |i, _| w[i] * v[i] + beta * center[i]);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_unstable_by(|&x, &y| brk[y].total_cmp(&brk[x]));
    let (mut sa, mut sb) = (0.0, 0.0);
    let mut tau = f64::NEG_INFINITY;
    for &i in &order {
        let t = (sa + a[i] - 1.0) / (sb + b[i]);
        if brk[i] <= t {
            break;
        }
        sa += a[i];
        sb += b[i];
        tau = t;
    }
    DVector::from_fn(k, |i, _| (a[i] - tau * b[i]).max(0.0))
}

fn floored(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(MASS_FLOOR))
}

fn marginal_step(
    current: &DVector<f64>,
    potential: &DVector<f64>,
    center: &DVector<f64>,
    entropy_weight: f64,
    rho: f64,
    cfg: &RobustConfig,
) -> Result<DVector<f64>> {
    let eta = cfg.eta;
    let log_mass = current.map(|x| x.max(MASS_FLOOR).ln());
    let grad = match cfg.step {
        MarginalStep::DualPotential => {
            let mut g = potential + log_mass * entropy_weight;
            let mean = g.mean();
            g.add_scalar_mut(-mean);
            g
        }
        MarginalStep::ScalingExponential => {
            let e = cfg.epsilon;
            let scaling = potential.map(|x| (x / e).exp());
            scaling.map(|a| (a / e).min(300.0).exp()) + log_mass * entropy_weight
        }
    };
    match cfg.projection {
        MarginalProjection::Scaled => {
            // Step in the metric diag(current): small entries move in
            // proportion to their size. The x-weighted centering is absorbed
            // by the sum constraint. The step is shortened so that every entry
            // keeps at least half its mass before projection; shortening
            // leaves the fixed points unchanged.
            let x = current.map(|v| v.max(MASS_FLOOR));
            let shift = x.dot(&grad) / x.sum();
            let top = grad.iter().fold(0.0f64, |m, g| m.max(g - shift));
            let eta = if eta * top > 0.5 { 0.5 / top } else { eta };
            let v = x.zip_map(&grad, |xi, g| xi * (1.0 - eta * (g - shift)));
            let w = x.map(|xi| 1.0 / xi);
            finite(project_simplex_ball_weighted(&v, &w, center, rho))
        }
        MarginalProjection::Euclidean => finite(project_simplex_ball(&(current - grad * eta), center, rho)),
        MarginalProjection::Sequential => {
            let mut next = current - grad * eta;
            next.apply(|x| *x = x.max(0.0));
            let total = next.sum();
            if !(total.is_finite() && total > 0.0) {
                return Err(Error::NonFinite("marginal update left the simplex".into()));
            }
            next /= total;
            Ok(project_l2_ball(&next, center, rho))
        }
    }
}

fn finite(v: DVector<f64>) -> Result<DVector<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite("marginal update".into()))
    }
}

/// Relaxed-marginal entropic OT by alternating Sinkhorn sweeps and projected
/// gradient steps on the marginals, `cfg.outer_iters` rounds.
///
/// A side with zero radius keeps its nominal marginal. The returned plan is
/// from the sweep after the last marginal update, so its marginals match
/// `(mu_bar, nu_bar)` up to one sweep's row violation; `converged` reports
/// whether that violation is within `cfg.tol`.
pub fn robust_solve(
    cost: &CostMatrix,
    mu: &MarginalWeights,
    nu: &MarginalWeights,
    cfg: &RobustConfig,
) -> Result<RobustSolution> {
    cfg.validate()?;
    check_marginals(cost, mu, nu)?;
    let eps = cfg.epsilon;
    let mut state = ScalingState::new(cost.values(), eps, None);
    let mut mu_bar = mu.as_vector().clone();
    let mut nu_bar = nu.as_vector().clone();

    let sweep = |state: &mut ScalingState, a: &DVector<f64>, b: &DVector<f64>| -> Result<()> {
        state.update_rows(&floored(a))?;
        state.update_cols(&floored(b))
    };
    sweep(&mut state, &mu_bar, &nu_bar)?;
    for _ in 0..cfg.outer_iters {
        let (xi, zeta) = gauge_fixed(state.potentials());
        if cfg.rho1 > 0.0 {
            mu_bar = marginal_step(&mu_bar, &xi, mu.as_vector(), cfg.epsilon1, cfg.rho1, cfg)?;
        }
        if cfg.rho2 > 0.0 {
            nu_bar = marginal_step(&nu_bar, &zeta, nu.as_vector(), cfg.epsilon2, cfg.rho2, cfg)?;
        }
        sweep(&mut state, &mu_bar, &nu_bar)?;
    }

    let entries = state.plan();
    if entries.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("robust plan".into()));
    }
    let mu_bar = MarginalWeights::from_raw(mu_bar);
    let nu_bar = MarginalWeights::from_raw(nu_bar);
    let plan = TransportPlan::new(entries, mu_bar.clone(), nu_bar.clone())?;
    let marginal_violation = plan.marginal_violation();
    let (xi, zeta) = state.potentials();
    Ok(RobustSolution {
        plan,
        mu_bar,
        nu_bar,
        mu: mu.clone(),
        nu: nu.clone(),
        duals: DualPotentials::from_log(xi, zeta, eps),
        converged: marginal_violation <= cfg.tol,
        marginal_violation,
    })
}

fn gauge_fixed((mut xi, mut zeta): (DVector<f64>, DVector<f64>)) -> (DVector<f64>, DVector<f64>) {
    let last = zeta[zeta.len() - 1];
    if last.is_finite() {
        xi.add_scalar_mut(last);
        zeta.add_scalar_mut(-last);
    }
    (xi, zeta)
}

fn neg_entropy(v: &DVector<f64>) -> f64 {
    v.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum()
}

/// `<C, S> + eps H(S) + eps1 h(mu_bar) + eps2 h(nu_bar)` for a plan and the
/// marginals it couples.
pub fn robust_objective(
    cost: &CostMatrix,
    plan: &DMatrix<f64>,
    mu_bar: &DVector<f64>,
    nu_bar: &DVector<f64>,
    cfg: &RobustConfig,
) -> f64 {
    cost.values().dot(plan)
        + cfg.epsilon * entropy(plan)
        + cfg.epsilon1 * neg_entropy(mu_bar)
        + cfg.epsilon2 * neg_entropy(nu_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{sinkhorn_solve, SinkhornConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_cost(n: usize, m: usize, seed: u64) -> CostMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CostMatrix::from_fn(n, m, |_, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let c = DVector::from_vec(vec![0.5, 0.5]);
        let inside = DVector::from_vec(vec![0.6, 0.4]);
        assert_eq!(project_l2_ball(&inside, &c, 0.125), inside);
        let p = project_l2_ball(&DVector::from_vec(vec![1.0, 0.0]), &c, 0.125);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(project_l2_ball(&DVector::from_vec(vec![1.0, 0.0]), &c, 0.0), c);
    }

    #[test]
    fn zero_radius_reduces_to_sinkhorn() {
        let c = random_cost(5, 4, 1);
        let (mu, nu) = (MarginalWeights::uniform(5), MarginalWeights::uniform(4));
        let mut cfg = RobustConfig::new(0.1, 0.0, 0.0);
        cfg.epsilon1 = 0.0;
        cfg.epsilon2 = 0.0;
        let r = robust_solve(&c, &mu, &nu, &cfg).unwrap();
        let s = sinkhorn_solve(&c, &mu, &nu, &SinkhornConfig::new(0.1)).unwrap();
        assert_eq!(r.mu_bar, mu);
        assert_eq!(r.nu_bar, nu);
        assert!((r.plan.entries() - s.plan.entries()).amax() < 1e-6);
        let (a, b) = (r.plan.transport_cost(&c).unwrap(), s.plan.transport_cost(&c).unwrap());
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn zero_cost_keeps_uniform_marginals() {
        let c = CostMatrix::from_fn(4, 3, |_, _| 0.0).unwrap();
        let (mu, nu) = (MarginalWeights::uniform(4), MarginalWeights::uniform(3));
        let r = robust_solve(&c, &mu, &nu, &RobustConfig::new(0.1, 0.05, 0.05)).unwrap();
        assert!((r.mu_bar.as_vector() - mu.as_vector()).amax() < 1e-15);
        assert!((r.nu_bar.as_vector() - nu.as_vector()).amax() < 1e-15);
        assert!(r.plan.entries().iter().all(|s| (s - 1.0 / 12.0).abs() < 1e-15));
    }

    /// Minimizes the relaxed objective over a grid of feasible `mu_bar` with
    /// `nu_bar = nu` fixed, solving the inner problem exactly at each point.
    fn grid_oracle(c: &CostMatrix, cfg: &RobustConfig, steps: usize) -> (DVector<f64>, f64) {
        let nu = MarginalWeights::uniform(c.ncols());
        let center = DVector::from_element(3, 1.0 / 3.0);
        let mut best = (center.clone(), f64::INFINITY);
        for a in 0..=steps {
            for b in 0..=steps - a {
                let v = DVector::from_vec(vec![a as f64, b as f64, (steps - a - b) as f64]) / steps as f64;
                if (&v - &center).norm_squared() > cfg.rho1 || v.min() <= 0.0 {
                    continue;
                }
                let mu = MarginalWeights::new(v.as_slice().to_vec()).unwrap();
                let inner = SinkhornConfig::new(cfg.epsilon).with_tol(1e-12);
                let s = sinkhorn_solve(c, &mu, &nu, &inner).unwrap();
                let f = robust_objective(c, s.plan.entries(), &v, nu.as_vector(), cfg);
                if f < best.1 {
                    best = (v, f);
                }
            }
        }
        best
    }

    #[test]
    fn expensive_row_loses_mass_like_grid_oracle() {
        let c = CostMatrix::from_rows(&[vec![0.1, 0.3], vec![0.2, 0.0], vec![5.0, 5.0]]).unwrap();
        let mut cfg = RobustConfig::new(0.1, 0.02, 0.0);
        cfg.epsilon1 = 0.01;
        cfg.eta = 0.05;
        cfg.outer_iters = 4000;
        let (mu, nu) = (MarginalWeights::uniform(3), MarginalWeights::uniform(2));
        let r = robust_solve(&c, &mu, &nu, &cfg).unwrap();
        assert!(r.converged);
        let (grid_best, grid_f) = grid_oracle(&c, &cfg, 300);
        assert!(grid_best[2] < 1.0 / 3.0);
        assert!(r.mu_bar.as_slice()[2] < 1.0 / 3.0);
        // The grid is coarse near the sphere, so the solver may do better.
        assert!((r.mu_bar.as_vector() - &grid_best).amax() < 3e-2);

        let f = robust_objective(&c, r.plan.entries(), r.mu_bar.as_vector(), r.nu_bar.as_vector(), &cfg);
        assert!(f <= grid_f + 1e-6);
        let s = sinkhorn_solve(&c, &mu, &nu, &SinkhornConfig::new(0.1)).unwrap();
        let nominal = robust_objective(&c, s.plan.entries(), mu.as_vector(), nu.as_vector(), &cfg);
        assert!(f <= nominal + 1e-8);
    }

    #[test]
    fn exponential_step_variant_stays_feasible() {
        let c = random_cost(5, 4, 7);
        let mut cfg = RobustConfig::new(0.5, 0.05, 0.05);
        cfg.step = MarginalStep::ScalingExponential;
        let r = robust_solve(&c, &MarginalWeights::uniform(5), &MarginalWeights::uniform(4), &cfg).unwrap();
        assert!((r.mu_bar.mass() - 1.0).abs() < 1e-10);
        assert!((r.mu_bar.as_vector() - r.mu.as_vector()).norm_squared() <= cfg.rho1 + 1e-12);
    }

    #[test]
    fn wide_ball_gives_simplex_projection() {
        let center = DVector::from_element(3, 1.0 / 3.0);
        let y = project_simplex_ball(&DVector::from_vec(vec![0.5, 0.8, -0.1]), &center, 10.0);
        assert!((y - DVector::from_vec(vec![0.35, 0.65, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn stiff_row_converges_with_scaled_step() {
        let base = random_cost(6, 4, 3);
        let c = CostMatrix::from_fn(6, 4, |i, j| if i == 5 { 3.0 } else { base.get(i, j) }).unwrap();
        let (mu, nu) = (MarginalWeights::uniform(6), MarginalWeights::uniform(4));
        let mut cfg = RobustConfig::new(0.1, 0.2, 0.0);
        cfg.epsilon1 = 0.1;
        cfg.eta = 0.1;
        cfg.outer_iters = 5000;
        cfg.tol = 1e-10;
        let r = robust_solve(&c, &mu, &nu, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.mu_bar.as_slice()[5] < 1e-3);
        let f = robust_objective(&c, r.plan.entries(), r.mu_bar.as_vector(), r.nu_bar.as_vector(), &cfg);
        cfg.projection = MarginalProjection::Sequential;
        let q = robust_solve(&c, &mu, &nu, &cfg).unwrap();
        let g = robust_objective(&c, q.plan.entries(), q.mu_bar.as_vector(), q.nu_bar.as_vector(), &cfg);
        assert!(f <= g + 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn weighted_projection_is_feasible_and_closest(
            k in 2usize..7, seed in any::<u64>(), rho in 0.001f64..0.5, unit in any::<bool>(),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw = DVector::from_fn(k, |_, _| rng.random::<f64>() + 0.05);
            let center = &raw / raw.sum();
            let v = DVector::from_fn(k, |_, _| 2.0 * rng.random::<f64>() - 0.5);
            let w = if unit {
                DVector::from_element(k, 1.0)
            } else {
                DVector::from_fn(k, |_, _| 0.1 + 10.0 * rng.random::<f64>())
            };
            let y = project_simplex_ball_weighted(&v, &w, &center, rho);
            prop_assert!(y.iter().all(|x| *x >= 0.0));
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
            prop_assert!((&y - &center).norm_squared() <= rho * (1.0 + 1e-9));
            if unit {
                prop_assert!((project_simplex_ball(&v, &center, rho) - &y).amax() == 0.0);
            }
            let dist = |p: &DVector<f64>| (p - &v).component_mul(&(p - &v)).dot(&w);
            let dy = dist(&y);
            for _ in 0..50 {
                let e = DVector::from_fn(k, |_, _| -rng.random::<f64>().ln());
                let dir = &e / e.sum() - &center;
                let reach = (rho / dir.norm_squared().max(1e-300)).sqrt().min(1.0);
                let q = &center + dir * (reach * rng.random::<f64>());
                prop_assert!(dy <= dist(&q) + 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn marginals_stay_feasible(
            n in 2usize..8, m in 2usize..8, seed in any::<u64>(),
            rho1 in 0.0f64..0.2, rho2 in 0.0f64..0.2, eps in 0.05f64..1.0,
        ) {
            let c = random_cost(n, m, seed);
            let mut cfg = RobustConfig::new(eps, rho1, rho2);
            cfg.eta = 0.1;
            cfg.outer_iters = 50;
            let r = robust_solve(&c, &MarginalWeights::uniform(n), &MarginalWeights::uniform(m), &cfg).unwrap();
            for (bar, nominal, rho) in [(&r.mu_bar, &r.mu, rho1), (&r.nu_bar, &r.nu, rho2)] {
                prop_assert!((bar.as_vector() - nominal.as_vector()).norm_squared() <= rho + 1e-12);
                prop_assert!(bar.as_slice().iter().all(|x| *x >= 0.0));
                prop_assert!((bar.mass() - 1.0).abs() <= 1e-10);
            }
        }
    }
}
