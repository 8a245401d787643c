use std::time::Instant;

use crate::error::{Error, Result};
use crate::models::{ModelKind, ShuffledDataset, SquaredResidualCost};

use super::{initial_params, TrainConfig, TrainReport};

fn paired_descent(data: &ShuffledDataset, kind: ModelKind, cfg: &TrainConfig, pairs: &[usize]) -> Result<TrainReport> {
    let start = Instant::now();
    let mut params = initial_params(data, kind, cfg)?;
    let mut trace = Vec::with_capacity(cfg.iters);
    let scale = 1.0 / pairs.len() as f64;
    for _ in 0..cfg.iters {
        let model = SquaredResidualCost::new(&params, data)?;
        let (loss, grad) = model.paired_loss_grad(pairs)?;
        trace.push(loss * scale);
        params.w.axpy(-cfg.learning_rate * scale, &grad, 1.0);
    }
    Ok(TrainReport {
        final_params: params,
        objective_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        recovered_perm: None,
        unconverged_solves: 0,
        singular_fallbacks: 0,
    })
}

/// Full-batch gradient descent on the mean squared residual, pairing row `i`
/// of `D1` with row `i` of `D2` and ignoring the shuffle.
pub fn least_squares_train(data: &ShuffledDataset, kind: ModelKind, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.n() > data.m() {
        return Err(Error::DimensionMismatch(format!("index pairing needs n <= m, got {} and {}", data.n(), data.m())));
    }
    let pairs: Vec<usize> = (0..data.n()).collect();
    paired_descent(data, kind, cfg, &pairs)
}

/// Full-batch gradient descent on the mean squared residual over the true
/// pairs.
pub fn oracle_train(data: &ShuffledDataset, kind: ModelKind, cfg: &TrainConfig) -> Result<TrainReport> {
    let pairs = data.true_perm().ok_or(Error::MissingGroundTruth)?.to_vec();
    paired_descent(data, kind, cfg, &pairs)
}
