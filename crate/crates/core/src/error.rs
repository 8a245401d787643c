use thiserror::Error;

/// Errors raised by the solvers, trainers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("invalid marginal weights: {0}")]
    InvalidMarginal(String),

    #[error("plan marginals are not uniform")]
    NonUniformMarginals,

    #[error("brute-force assignment supports n <= {max}, got n = {n}")]
    TooLarge { n: usize, max: usize },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("lower-level solve did not converge (marginal violation {violation:.3e})")]
    NotConverged { violation: f64 },

    #[error("test labels have zero variance")]
    DegenerateLabels,

    #[error("ground-truth correspondence is required")]
    MissingGroundTruth,

    #[error("random sample consensus needs at least one iteration")]
    InsufficientIterations,

    #[error("rho must lie in (0, 1), got {0}")]
    InvalidRho(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dims(what: impl Into<String>) -> Error {
    Error::DimensionMismatch(what.into())
}
