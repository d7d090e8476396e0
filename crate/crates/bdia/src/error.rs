//! Error type shared by all solver modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid index {index} out of range {min}..={max}")]
    IndexOutOfRange { index: usize, min: usize, max: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("sigma(t) = 0 at t = {0}: noise predictor undefined, use the data-space value")]
    ZeroSigma(f64),

    #[error("t = {0} outside the schedule domain")]
    OutOfDomain(f64),

    #[error("gamma = 0 collapses to plain DDIM, which has no exact inverse")]
    NonInvertible,

    #[error("mixing weight p = 0 makes the coupled unmixing singular")]
    ZeroMixWeight,

    #[error("gamma1 = gamma2 = {0}: the coupled mixing matrix is singular")]
    SingularMixing(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("missing recorded delta for slot {0}")]
    MissingDelta(usize),

    #[error("traces disagree in shape: {0}")]
    TraceMismatch(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown solver {0:?}")]
    UnknownSolver(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
