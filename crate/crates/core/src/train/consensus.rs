use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelParams, ShuffledDataset};
use crate::rng::{substream_rng, Stream};

use super::am::least_squares_on;
use super::{TrainConfig, TrainReport};

/// How a row is judged to fit a hypothesis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InlierRule {
    /// `min_j |y_i - g(x_i) - h(z_j)| <= tol`: row `i` fits some `D2` row.
    /// Nearly every row passes once `m` is large.
    BestMatch,
    /// `|y_i - g(x_i) - h(z_i)| <= tol`: row `i` fits its index partner.
    #[default]
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsConfig {
    /// Hypotheses drawn per start.
    pub iters: usize,
    pub inlier_tol: f64,
    /// Independent starts; the estimate with the most inliers wins.
    pub starts: usize,
    pub rule: InlierRule,
    /// Inlier refits applied to the winning hypothesis of each start.
    pub refit_rounds: usize,
}

impl Default for RsConfig {
    fn default() -> Self {
        Self { iters: 200_000, inlier_tol: 1e-2, starts: 10, rule: InlierRule::Paired, refit_rounds: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsEstimate {
    pub params: ModelParams,
    pub inliers: usize,
}

/// Row partners of the inliers of `w`, as `(rows, cols)`.
fn inlier_pairs(data: &ShuffledDataset, w: &DVector<f64>, rule: InlierRule, tol: f64) -> (Vec<usize>, Vec<usize>) {
    let d = data.d();
    let g = data.x() * w.rows(0, d);
    let h = data.z() * w.rows(d, data.e());
    let r = data.y() - g;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    match rule {
        InlierRule::Paired => {
            for i in 0..data.n().min(data.m()) {
                if (r[i] - h[i]).abs() <= tol {
                    rows.push(i);
                    cols.push(i);
                }
            }
        }
        InlierRule::BestMatch => {
            let mut order: Vec<usize> = (0..h.len()).collect();
            order.sort_by(|&a, &b| h[a].total_cmp(&h[b]));
            for i in 0..r.len() {
                let k = order.partition_point(|&j| h[j] < r[i]);
                let best = [k.checked_sub(1), (k < order.len()).then_some(k)]
                    .into_iter()
                    .flatten()
                    .map(|k| order[k])
                    .min_by(|&a, &b| (r[i] - h[a]).abs().total_cmp(&(r[i] - h[b]).abs()));
                if let Some(j) = best {
                    if (r[i] - h[j]).abs() <= tol {
                        rows.push(i);
                        cols.push(j);
                    }
                }
            }
        }
    }
    (rows, cols)
}

/// Number of `D1` rows that fit `params` within `tol` under `rule`.
pub fn count_inliers(data: &ShuffledDataset, params: &ModelParams, rule: InlierRule, tol: f64) -> Result<usize> {
    if params.kind != ModelKind::Linear {
        return Err(Error::InvalidConfig("consensus needs the linear model".into()));
    }
    if params.len() != data.p() {
        return Err(Error::DimensionMismatch(format!("{} parameters for {} features", params.len(), data.p())));
    }
    Ok(inlier_pairs(data, &params.w, rule, tol).0.len())
}

fn validate(data: &ShuffledDataset, rs: &RsConfig) -> Result<()> {
    if rs.iters == 0 || rs.starts == 0 {
        return Err(Error::InsufficientIterations);
    }
    if !(rs.inlier_tol.is_finite() && rs.inlier_tol >= 0.0) {
        return Err(Error::InvalidConfig("inlier_tol must be >= 0".into()));
    }
    let k = data.n().min(data.m());
    if k < data.p() {
        return Err(Error::InvalidConfig(format!("{k} index pairs cannot determine {} parameters", data.p())));
    }
    Ok(())
}

fn single_start(data: &ShuffledDataset, rs: &RsConfig, seed: u64, start: usize) -> RsEstimate {
    let p = data.p();
    let d = data.d();
    let k = data.n().min(data.m());
    let mut rng = substream_rng(seed, Stream::Consensus, start as u64);
    let mut best: Option<(usize, DVector<f64>)> = None;
    for _ in 0..rs.iters {
        let idx = rand::seq::index::sample(&mut rng, k, p);
        let a = DMatrix::from_fn(p, p, |r, c| {
            let i = idx.index(r);
            if c < d {
                data.x()[(i, c)]
            } else {
                data.z()[(i, c - d)]
            }
        });
        let b = DVector::from_fn(p, |r, _| data.y()[idx.index(r)]);
        let Some(w) = a.lu().solve(&b) else { continue };
        if !w.iter().all(|v| v.is_finite()) {
            continue;
        }
        let count = inlier_pairs(data, &w, rs.rule, rs.inlier_tol).0.len();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, w));
        }
    }
    let (mut count, mut w) = best.unwrap_or((0, DVector::zeros(p)));
    for _ in 0..rs.refit_rounds {
        let (rows, cols) = inlier_pairs(data, &w, rs.rule, rs.inlier_tol);
        if rows.len() < p {
            break;
        }
        let Some(refit) = least_squares_on(data, &rows, &cols) else { break };
        let refit_count = inlier_pairs(data, &refit, rs.rule, rs.inlier_tol).0.len();
        if refit_count < count {
            break;
        }
        count = refit_count;
        w = refit;
    }
    RsEstimate { params: ModelParams::new(ModelKind::Linear, w), inliers: count }
}

fn run_starts(data: &ShuffledDataset, rs: &RsConfig, seed: u64) -> Result<Vec<RsEstimate>> {
    validate(data, rs)?;
    Ok((0..rs.starts).map(|s| single_start(data, rs, seed, s)).collect())
}

fn pick_best(estimates: Vec<RsEstimate>) -> RsEstimate {
    let mut best: Option<RsEstimate> = None;
    for e in estimates {
        if best.as_ref().is_none_or(|b| e.inliers > b.inliers) {
            best = Some(e);
        }
    }
    best.expect("at least one start")
}

/// Random-sample consensus for the linear model: draw `p` rows, assume each
/// is paired with the same index in `D2`, solve the square system, and keep
/// the hypothesis with the most inliers; then refit on its inliers. Repeated
/// over `rs.starts` independent streams.
pub fn rs_estimate(data: &ShuffledDataset, rs: &RsConfig, seed: u64) -> Result<RsEstimate> {
    Ok(pick_best(run_starts(data, rs, seed)?))
}

/// [`rs_estimate`] packaged as a trainer. The trace holds the inlier count of
/// each start's estimate.
pub fn rs_train(data: &ShuffledDataset, cfg: &TrainConfig, rs: &RsConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let estimates = run_starts(data, rs, cfg.seed)?;
    let trace = estimates.iter().map(|e| e.inliers as f64).collect();
    let best = pick_best(estimates);
    Ok(TrainReport {
        final_params: best.params,
        objective_trace: trace,
        wall_time: start.elapsed().as_secs_f64(),
        recovered_perm: None,
        unconverged_solves: 0,
        singular_fallbacks: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_unlabeled_sensing, Noise};

    fn rs(iters: usize, tol: f64, starts: usize) -> RsConfig {
        RsConfig { iters, inlier_tol: tol, starts, ..RsConfig::default() }
    }

    #[test]
    fn default_rule_is_paired() {
        assert_eq!(RsConfig::default().rule, InlierRule::Paired);
    }

    #[test]
    fn unshuffled_noiseless_is_recovered_exactly() {
        let split = gen_unlabeled_sensing(40, 4, Noise::Variance(0.0), 0.0, 1).unwrap();
        let est = rs_estimate(&split.train, &rs(5, 1e-6, 1), 0).unwrap();
        assert_eq!(est.inliers, 40);
        assert!((&est.params.w - &split.w_true).amax() < 1e-9);
    }

    #[test]
    fn half_shuffled_noiseless_keeps_at_least_half() {
        let split = gen_unlabeled_sensing(200, 5, Noise::Variance(0.0), 0.5, 2).unwrap();
        let est = rs_estimate(&split.train, &rs(200, 1e-2, 2), 3).unwrap();
        assert!(est.inliers >= 100, "{} inliers", est.inliers);
        for rule in [InlierRule::Paired, InlierRule::BestMatch] {
            let n = count_inliers(&split.train, &est.params, rule, 1e-2).unwrap();
            assert!(n >= 100);
        }
    }

    #[test]
    fn zero_iterations_are_rejected() {
        let split = gen_unlabeled_sensing(10, 2, Noise::Variance(0.0), 0.5, 3).unwrap();
        let cfg = TrainConfig { batch_size: 10, ..TrainConfig::default() };
        assert!(matches!(rs_train(&split.train, &cfg, &rs(0, 1e-2, 1)), Err(Error::InsufficientIterations)));
    }

    #[test]
    fn paired_rule_counts_index_matches() {
        let split = gen_unlabeled_sensing(100, 3, Noise::Variance(0.0), 0.3, 4).unwrap();
        let truth = ModelParams::new(ModelKind::Linear, split.w_true.clone());
        let fixed = split.train.true_perm().unwrap().iter().enumerate().filter(|(i, j)| i == *j).count();
        assert_eq!(count_inliers(&split.train, &truth, InlierRule::Paired, 1e-9).unwrap(), fixed);
        assert_eq!(count_inliers(&split.train, &truth, InlierRule::BestMatch, 1e-9).unwrap(), 100);
    }
}
