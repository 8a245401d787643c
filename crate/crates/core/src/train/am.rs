use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ShuffledDataset, SquaredResidualCost};
use crate::ot::assignment_sorted;
use crate::rng::{stream_rng, Stream};

use super::{initial_params, sample_batch, TrainConfig, TrainReport};

/// Parameter update after each hard assignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmUpdate {
    /// One gradient step on the matched squared residuals.
    #[default]
    GradientStep,
    /// Exact least squares on the matched pairs (linear model only).
    ExactLeastSquares,
}

/// Alternating minimization: hard assignment of the batch under the current
/// parameters, then a parameter update on the matched pairs.
///
/// The squared-residual cost `(r_i - h_j)^2` is convex in `r_i - h_j`, so the
/// optimal assignment is the sorted matching; it is exact and O(n log n).
pub fn am_train(data: &ShuffledDataset, kind: ModelKind, cfg: &TrainConfig, update: AmUpdate) -> Result<TrainReport> {
    cfg.validate(data)?;
    let (n, m) = (data.n(), data.m());
    if n != m {
        return Err(Error::DimensionMismatch(format!("hard assignment needs n = m, got {n} and {m}")));
    }
    if update == AmUpdate::ExactLeastSquares && kind != ModelKind::Linear {
        return Err(Error::InvalidConfig("exact least squares needs the linear model".into()));
    }
    let start = Instant::now();
    let mut params = initial_params(data, kind, cfg)?;
    let mut rng = stream_rng(cfg.seed, Stream::Batches);
    let b = cfg.batch_size;
    let mut trace = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let rows = sample_batch(&mut rng, n, b);
        let cols = sample_batch(&mut rng, m, b);
        let batch = if b == n { data.clone() } else { data.select(&rows, &cols) };
        let model = SquaredResidualCost::new(&params, &batch)?;
        let perm = assignment_sorted(model.row_targets().as_slice(), model.col_predictions().as_slice())?;
        let (loss, grad) = model.paired_loss_grad(&perm)?;
        trace.push(loss);
        match update {
            AmUpdate::GradientStep => params.w.axpy(-cfg.learning_rate, &grad, 1.0),
            AmUpdate::ExactLeastSquares => {
                if let Some(w) = paired_least_squares(&batch, &perm) {
                    params.w = w;
                }
            }
        }
    }
    let model = SquaredResidualCost::new(&params, data)?;
    let perm = assignment_sorted(model.row_targets().as_slice(), model.col_predictions().as_slice())?;
    Ok(TrainReport {
        final_params: params,
        objective_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        recovered_perm: Some(perm),
        unconverged_solves: 0,
        singular_fallbacks: 0,
    })
}

/// Least-squares linear fit of `y_i` on `[x_i, z_pairs[i]]`; `None` if the
/// normal equations are singular.
pub(crate) fn paired_least_squares(data: &ShuffledDataset, pairs: &[usize]) -> Option<DVector<f64>> {
    let rows: Vec<usize> = (0..pairs.len()).collect();
    least_squares_on(data, &rows, pairs)
}

pub(crate) fn least_squares_on(data: &ShuffledDataset, rows: &[usize], cols: &[usize]) -> Option<DVector<f64>> {
    let (d, e) = (data.d(), data.e());
    let feats =
        DMatrix::from_fn(
            rows.len(),
            d + e,
            |k, c| {
                if c < d {
                    data.x()[(rows[k], c)]
                } else {
                    data.z()[(cols[k], c - d)]
                }
            },
        );
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.y()[i]));
    let gram = feats.tr_mul(&feats);
    let rhs = feats.tr_mul(&y);
    gram.cholesky().map(|c| c.solve(&rhs))
}
