//! Synthetic data, experiment orchestration, result files and benchmarks.

pub mod alloc;
mod bench;
mod data;
mod experiment;
mod io;

pub use bench::{bench_backward, memory_exponent, BenchRow};
pub use data::{gen_nonlinear, gen_unlabeled_sensing, Noise, Split};
pub use experiment::{run_experiment, summarize, ExperimentSpec, Method, Metric, Protocol, ResultLine, ResultRecord};
pub use io::{read_dataset, read_results, write_dataset, write_results};
