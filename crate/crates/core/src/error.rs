use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid squeeze spec: {0}")]
    InvalidSqueeze(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("data has zero variance, no principal direction exists")]
    ZeroVariance,

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("dimension {n} exceeds dense materialization limit {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient, optimizer step refused")]
    NonFiniteGradient,

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64, trace: Vec<(u64, f64)> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse { path: PathBuf, offset: u64, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), offset, message: message.into() }
    }
}
