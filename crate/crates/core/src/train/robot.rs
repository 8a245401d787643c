use std::borrow::Cow;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hypergrad::{plan_sensitivity, robust_plan_sensitivity};
use crate::models::{CostGradient, ModelKind, ShuffledDataset, SquaredResidualCost};
use crate::ot::{
    round_to_permutation, sinkhorn_solve_warm, DualPotentials, MarginalWeights, Permutation, SinkhornConfig,
};
use crate::rng::{stream_rng, Stream};
use crate::robust::{robust_solve, RobustConfig};

use super::{initial_params, sample_batch, TrainConfig, TrainReport};

fn sinkhorn_config(cfg: &TrainConfig) -> SinkhornConfig {
    SinkhornConfig::new(cfg.epsilon).with_tol(cfg.sinkhorn_tol).with_max_iters(cfg.sinkhorn_max_iters)
}

fn note_unconverged(cfg: &TrainConfig, violation: f64, count: &mut usize) -> Result<()> {
    if cfg.strict_convergence {
        return Err(Error::NotConverged { violation });
    }
    *count += 1;
    log::debug!("inner solve stopped at marginal violation {violation:.2e}");
    Ok(())
}

/// Plan sensitivity, or the plan itself when the implicit system is
/// singular. That happens when the plan is a permutation to machine
/// precision; the sensitivity then tends to the plan.
fn sensitivity_or_plan(sens: Result<DMatrix<f64>>, plan: &DMatrix<f64>, count: &mut usize) -> Result<DMatrix<f64>> {
    match sens {
        Err(Error::SingularSystem(msg)) => {
            log::debug!("implicit system singular ({msg}); using the plan");
            *count += 1;
            Ok(plan.clone())
        }
        other => other,
    }
}

fn batch_view<'a>(data: &'a ShuffledDataset, rows: &[usize], cols: &[usize]) -> Cow<'a, ShuffledDataset> {
    if rows.len() == data.n() && cols.len() == data.m() {
        Cow::Borrowed(data)
    } else {
        Cow::Owned(data.select(rows, cols))
    }
}

/// Hypergradient descent on `w -> <C(w), S*(w)>`, with `S*` the entropic plan
/// between equal-size batches of both datasets (uniform marginals). The
/// objective is on the correspondence scale, i.e. a sum of residuals over the
/// batch rows.
pub fn robot_train(data: &ShuffledDataset, kind: ModelKind, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate(data)?;
    let start = Instant::now();
    let mut params = initial_params(data, kind, cfg)?;
    let mut rng = stream_rng(cfg.seed, Stream::Batches);
    let sink = sinkhorn_config(cfg);
    let (n, m) = (data.n(), data.m());
    let (bn, bm) = (cfg.batch_size, cfg.batch_size.min(m));
    let full = bn == n && bm == m;
    let (mu, nu) = (MarginalWeights::uniform(bn), MarginalWeights::uniform(bm));

    let mut warm: Option<DualPotentials> = None;
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut unconverged = 0;
    let mut singular = 0;
    for _ in 0..cfg.iters {
        let rows = sample_batch(&mut rng, n, bn);
        let cols = sample_batch(&mut rng, m, bm);
        let batch = batch_view(data, &rows, &cols);
        let model = SquaredResidualCost::new(&params, &batch)?;
        let cost = model.cost_matrix()?;
        let sol = sinkhorn_solve_warm(&cost, &mu, &nu, &sink, warm.as_ref())?;
        if !sol.converged {
            note_unconverged(cfg, sol.marginal_violation, &mut unconverged)?;
        }
        let scale = bn as f64;
        trace.push(scale * sol.plan.transport_cost(&cost)?);
        let sens = plan_sensitivity(&cost, sol.plan.entries(), cfg.epsilon);
        let sens = sensitivity_or_plan(sens, sol.plan.entries(), &mut singular)?;
        let grad = model.contract(&sens) * scale;
        params.w.axpy(-cfg.learning_rate, &grad, 1.0);
        if full {
            warm = Some(sol.duals);
        }
    }

    let recovered_perm = if n == m {
        let model = SquaredResidualCost::new(&params, data)?;
        let cost = model.cost_matrix()?;
        let u = MarginalWeights::uniform(n);
        let sol = sinkhorn_solve_warm(&cost, &u, &u, &sink, warm.as_ref())?;
        Some(round_to_permutation(&sol.plan)?)
    } else {
        None
    };
    Ok(TrainReport {
        final_params: params,
        objective_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        recovered_perm,
        unconverged_solves: unconverged,
        singular_fallbacks: singular,
    })
}

/// As [`robot_train`] with relaxed marginals. The `D2` batch keeps the size
/// ratio of the two datasets, `round(batch_size * m / n)`.
pub fn robot_robust_train(
    data: &ShuffledDataset,
    kind: ModelKind,
    cfg: &TrainConfig,
    rcfg: &RobustConfig,
) -> Result<TrainReport> {
    cfg.validate(data)?;
    rcfg.validate()?;
    let start = Instant::now();
    let mut params = initial_params(data, kind, cfg)?;
    let mut rng = stream_rng(cfg.seed, Stream::Batches);
    let (n, m) = (data.n(), data.m());
    let bn = cfg.batch_size;
    let bm = ((bn as f64 * m as f64 / n as f64).round() as usize).clamp(1, m);
    let (mu, nu) = (MarginalWeights::uniform(bn), MarginalWeights::uniform(bm));
    let rcfg = RobustConfig { epsilon: cfg.epsilon, ..*rcfg };

    let mut trace = Vec::with_capacity(cfg.iters);
    let mut unconverged = 0;
    let mut singular = 0;
    let mut last_plan = None;
    for _ in 0..cfg.iters {
        let rows = sample_batch(&mut rng, n, bn);
        let cols = sample_batch(&mut rng, m, bm);
        let batch = batch_view(data, &rows, &cols);
        let model = SquaredResidualCost::new(&params, &batch)?;
        let cost = model.cost_matrix()?;
        let sol = robust_solve(&cost, &mu, &nu, &rcfg)?;
        if !sol.converged {
            note_unconverged(cfg, sol.marginal_violation, &mut unconverged)?;
        }
        let scale = bn as f64;
        trace.push(scale * sol.plan.transport_cost(&cost)?);
        let sens = robust_plan_sensitivity(&cost, &sol, &rcfg);
        let sens = sensitivity_or_plan(sens, sol.plan.entries(), &mut singular)?;
        let grad = model.contract(&sens) * scale;
        params.w.axpy(-cfg.learning_rate, &grad, 1.0);
        if bn == n && bm == m {
            last_plan = Some(sol.plan);
        }
    }

    let recovered_perm: Option<Permutation> = match last_plan {
        Some(plan) if n == m => Some(round_to_permutation(&plan)?),
        _ => None,
    };
    Ok(TrainReport {
        final_params: params,
        objective_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        recovered_perm,
        unconverged_solves: unconverged,
        singular_fallbacks: singular,
    })
}
