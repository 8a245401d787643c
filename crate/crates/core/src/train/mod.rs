//! Upper-level training loops and baselines.

mod am;
mod baselines;
mod condition;
mod consensus;
mod robot;

pub use am::{am_train, AmUpdate};
pub use baselines::{least_squares_train, oracle_train};
pub use condition::{condition_numbers, condition_numbers_numeric};
pub use consensus::{count_inliers, rs_estimate, rs_train, InlierRule, RsConfig, RsEstimate};
pub use robot::{robot_robust_train, robot_train};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelParams, ShuffledDataset};
use crate::ot::Permutation;
use crate::rng::{stream_rng, Stream};

/// Starting point of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    RandomNormal,
    /// Best of several random-sample-consensus runs (linear model only).
    FromRs(RsConfig),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iters: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub init: Init,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iters: usize,
    /// Fail instead of continuing when an inner solve misses its tolerance.
    pub strict_convergence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            iters: 2000,
            batch_size: 500,
            epsilon: 1e-4,
            seed: 0,
            init: Init::Zeros,
            sinkhorn_tol: 1e-9,
            sinkhorn_max_iters: 10_000,
            strict_convergence: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &ShuffledDataset) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.batch_size == 0 || self.batch_size > data.n() {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be in 1..={}, got {}",
                data.n(),
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_params: ModelParams,
    /// Upper-level objective before each update.
    pub objective_trace: Vec<f64>,
    /// Seconds.
    pub wall_time: f64,
    pub recovered_perm: Option<Permutation>,
    /// Inner solves that stopped above their tolerance.
    pub unconverged_solves: usize,
    /// Steps whose implicit system was singular and used the plan as the
    /// cost sensitivity.
    pub singular_fallbacks: usize,
}

pub(crate) fn initial_params(data: &ShuffledDataset, kind: ModelKind, cfg: &TrainConfig) -> Result<ModelParams> {
    let p = data.p();
    match &cfg.init {
        Init::Zeros => Ok(ModelParams::zeros(kind, p)),
        Init::RandomNormal => {
            let mut rng = stream_rng(cfg.seed, Stream::Init);
            let w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            Ok(ModelParams::new(kind, w))
        }
        Init::FromRs(rs) => {
            if kind != ModelKind::Linear {
                return Err(Error::InvalidConfig("consensus init needs the linear model".into()));
            }
            Ok(rs_estimate(data, rs, cfg.seed)?.params)
        }
        Init::Explicit(w) => {
            if w.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "explicit init has {} entries, model needs {p}",
                    w.len()
                )));
            }
            Ok(ModelParams::new(kind, DVector::from_column_slice(w)))
        }
    }
}

/// `k` distinct sorted indices out of `0..n`, or all of them when `k >= n`.
pub(crate) fn sample_batch<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}
