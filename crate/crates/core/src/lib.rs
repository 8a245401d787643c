//! Regression without correspondence through entropic optimal transport.
//!
//! The lower problem matches the rows of two datasets with an entropic
//! transport plan; the upper problem fits a regression model through that
//! plan, using the exact gradient of the plan with respect to the cost.

pub mod error;
pub mod harness;
pub mod hypergrad;
pub mod models;
pub mod ot;
pub mod rng;
pub mod robust;
pub mod train;

pub use error::{Error, Result};
pub use hypergrad::{exact_hypergradient, robust_hypergradient, Hypergradient};
pub use models::{ModelKind, ModelParams, ShuffledDataset};
pub use ot::{
    CostMatrix, DualPotentials, MarginalWeights, Permutation, SinkhornConfig, SinkhornSolution, TransportPlan,
};
pub use robust::{RobustConfig, RobustSolution};
pub use train::{TrainConfig, TrainReport};
