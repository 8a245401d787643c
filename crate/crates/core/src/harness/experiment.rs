use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{matching_error, relative_error, ModelKind};
use crate::robust::RobustConfig;
use crate::train::{
    am_train, least_squares_train, oracle_train, robot_robust_train, robot_train, rs_estimate, rs_train, AmUpdate,
    Init, RsConfig, TrainConfig, TrainReport,
};

use super::data::{gen_nonlinear, gen_unlabeled_sensing, Noise, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    UnlabeledSensing,
    NonlinearRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Robot,
    RobotRobust,
    Am,
    Ls,
    Oracle,
    Rs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Robot => "robot",
            Method::RobotRobust => "robot_robust",
            Method::Am => "am",
            Method::Ls => "ls",
            Method::Oracle => "oracle",
            Method::Rs => "rs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "robot" => Ok(Method::Robot),
            "robot_robust" => Ok(Method::RobotRobust),
            "am" => Ok(Method::Am),
            "ls" => Ok(Method::Ls),
            "oracle" => Ok(Method::Oracle),
            "rs" => Ok(Method::Rs),
            other => Err(Error::Parse(format!("unknown method {other:?}"))),
        }
    }
}

/// Test-set error reported in summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Residual under the true pairing.
    Relative,
    /// Residual under the best pairing of each test row with the `z` rows
    /// that belong to the test split.
    Matching,
}

impl Metric {
    pub fn of(self, r: &ResultRecord) -> f64 {
        match self {
            Metric::Relative => r.relative_error,
            Metric::Matching => r.matching_error,
        }
    }
}

/// A batch of runs: one dataset per seed, every method on each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    pub n: usize,
    /// Ignored by the linear protocol, which has no `x` block.
    pub d: usize,
    pub e: usize,
    pub noise_var: f64,
    pub shuffle_frac: f64,
    /// Overrides `noise_var` when set.
    pub snr: Option<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Settings of the hypergradient and alternating trainers. `seed` is
    /// replaced by each run's seed.
    pub train: TrainConfig,
    /// Settings of the LS and Oracle regressions.
    pub baseline: TrainConfig,
    pub robust: RobustConfig,
    pub rs: RsConfig,
    pub am_update: AmUpdate,
    pub metric: Metric,
}

impl ExperimentSpec {
    /// Linear protocol defaults: 50% shuffled, SNR 100, consensus init.
    pub fn unlabeled_sensing(n: usize, e: usize) -> Self {
        Self {
            protocol: Protocol::UnlabeledSensing,
            n,
            d: 0,
            e,
            noise_var: 0.0,
            shuffle_frac: 0.5,
            snr: Some(100.0),
            seeds: (1..=10).collect(),
            methods: vec![Method::Robot, Method::Am, Method::Ls],
            // Full batch: independent row and column batches rarely hold
            // true partners.
            train: TrainConfig {
                learning_rate: 4e-4,
                iters: 75,
                batch_size: n,
                epsilon: 1.0,
                sinkhorn_tol: 1e-6,
                init: Init::FromRs(RsConfig { iters: 20_000, ..RsConfig::default() }),
                ..TrainConfig::default()
            },
            baseline: TrainConfig { learning_rate: 5e-2, iters: 100, ..TrainConfig::default() },
            robust: RobustConfig::new(1e-4, 1e-3, 1e-3),
            rs: RsConfig::default(),
            am_update: AmUpdate::GradientStep,
            metric: Metric::Relative,
        }
    }

    /// Sine protocol defaults.
    pub fn nonlinear(n: usize, d: usize, e: usize) -> Self {
        Self {
            protocol: Protocol::NonlinearRegression,
            n,
            d,
            e,
            noise_var: 0.1,
            shuffle_frac: 1.0,
            snr: None,
            seeds: (1..=10).collect(),
            methods: vec![Method::RobotRobust, Method::Robot, Method::Ls],
            train: TrainConfig {
                learning_rate: 1e-3,
                iters: 80,
                batch_size: 100,
                epsilon: 0.1,
                sinkhorn_tol: 1e-6,
                ..TrainConfig::default()
            },
            baseline: TrainConfig { learning_rate: 5e-2, iters: 100, ..TrainConfig::default() },
            robust: RobustConfig::new(0.1, 3e-5, 3e-5),
            rs: RsConfig::default(),
            am_update: AmUpdate::GradientStep,
            metric: Metric::Matching,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.shuffle_frac) {
            return Err(Error::InvalidConfig(format!("shuffle_frac must be in [0, 1], got {}", self.shuffle_frac)));
        }
        Ok(())
    }

    fn model(&self) -> ModelKind {
        match self.protocol {
            Protocol::UnlabeledSensing => ModelKind::Linear,
            Protocol::NonlinearRegression => ModelKind::Sine,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Split> {
        match self.protocol {
            Protocol::UnlabeledSensing => {
                let noise = self.snr.map_or(Noise::Variance(self.noise_var), Noise::Snr);
                gen_unlabeled_sensing(self.n, self.e, noise, self.shuffle_frac, seed)
            }
            Protocol::NonlinearRegression => gen_nonlinear(self.n, self.d, self.e, self.noise_var, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: Method,
    pub seed: u64,
    pub relative_error: f64,
    pub matching_error: f64,
    /// Relative error on the training set under the true pairing.
    pub train_residual: f64,
    pub wall_time_s: f64,
    /// Fraction of `D1` rows whose recovered partner is the true one.
    pub perm_accuracy: Option<f64>,
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResultLine {
    Run(ResultRecord),
    Failed { method: Method, seed: u64, error: String },
    Summary { method: Method, runs: usize, mean: f64, std: f64 },
}

fn run_method(spec: &ExperimentSpec, split: &Split, method: Method, seed: u64, init: &Init) -> Result<ResultRecord> {
    let kind = spec.model();
    let train = TrainConfig { seed, init: init.clone(), ..spec.train.clone() };
    let baseline = TrainConfig { seed, ..spec.baseline.clone() };
    let data = &split.train;
    let report: TrainReport = match method {
        Method::Robot => robot_train(data, kind, &train)?,
        Method::RobotRobust => robot_robust_train(data, kind, &train, &spec.robust)?,
        Method::Am => am_train(data, kind, &train, spec.am_update)?,
        Method::Ls => least_squares_train(data, kind, &baseline)?,
        Method::Oracle => oracle_train(data, kind, &baseline)?,
        Method::Rs => rs_train(data, &train, &spec.rs)?,
    };
    let perm_accuracy = match (&report.recovered_perm, data.true_perm()) {
        (Some(p), Some(t)) => Some(p.iter().zip(t).filter(|(a, b)| a == b).count() as f64 / t.len() as f64),
        _ => None,
    };
    Ok(ResultRecord {
        method,
        seed,
        relative_error: relative_error(&report.final_params, &split.test)?,
        matching_error: matching_error(&report.final_params, &split.test)?,
        train_residual: relative_error(&report.final_params, data)?,
        wall_time_s: report.wall_time,
        perm_accuracy,
    })
}

fn run_seed(spec: &ExperimentSpec, seed: u64) -> Vec<ResultLine> {
    let fail = |method: Method, e: &Error| ResultLine::Failed { method, seed, error: e.to_string() };
    let fail_all = |e: Error| spec.methods.iter().map(|&m| fail(m, &e)).collect();
    let split = match spec.generate(seed) {
        Ok(s) => s,
        Err(e) => return fail_all(e),
    };
    // Consensus is shared by every method that starts from it.
    let init = match &spec.train.init {
        Init::FromRs(rs)
            if spec.methods.iter().any(|m| matches!(m, Method::Robot | Method::RobotRobust | Method::Am)) =>
        {
            match rs_estimate(&split.train, rs, seed) {
                Ok(est) => Init::Explicit(est.params.w.as_slice().to_vec()),
                Err(e) => return fail_all(e),
            }
        }
        other => other.clone(),
    };
    spec.methods
        .iter()
        .map(|&m| match run_method(spec, &split, m, seed, &init) {
            Ok(r) => {
                log::info!("seed {seed} {m}: {:?} error {:.4e}", spec.metric, spec.metric.of(&r));
                ResultLine::Run(r)
            }
            Err(e) => {
                log::warn!("seed {seed} {m} failed: {e}");
                fail(m, &e)
            }
        })
        .collect()
}

/// Mean and population standard deviation of `metric` over the successful
/// runs of each method, in method order.
pub fn summarize(methods: &[Method], metric: Metric, lines: &[ResultLine]) -> Vec<ResultLine> {
    methods
        .iter()
        .filter_map(|&method| {
            let errs: Vec<f64> = lines
                .iter()
                .filter_map(|l| match l {
                    ResultLine::Run(r) if r.method == method => Some(metric.of(r)),
                    _ => None,
                })
                .collect();
            if errs.is_empty() {
                return None;
            }
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64;
            Some(ResultLine::Summary { method, runs: errs.len(), mean, std: var.sqrt() })
        })
        .collect()
}

/// Run every method on every seed (seeds in parallel), then append one
/// summary line per method. Failures become `Failed` lines.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultLine>> {
    spec.validate()?;
    let per_seed: Vec<Vec<ResultLine>> = spec.seeds.par_iter().map(|&s| run_seed(spec, s)).collect();
    let mut lines: Vec<ResultLine> = per_seed.into_iter().flatten().collect();
    let summary = summarize(&spec.methods, spec.metric, &lines);
    lines.extend(summary);
    Ok(lines)
}
