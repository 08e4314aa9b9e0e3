use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("noise level must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("index {index} out of range for {len} sources")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("bad range: {0}")]
    BadRange(String),

    #[error("non-finite sampler state at schedule index {step}")]
    NonFiniteState { step: usize },

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("training loss diverged at step {step}")]
    DivergedLoss { step: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("no chunks left after filtering")]
    EmptyAfterFilter,

    #[error("quadrature grid too coarse: boundary mass {0:e}")]
    GridTooCoarse(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error in {field}: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 4,
            Error::NonFiniteState { .. }
            | Error::DivergedLoss { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::GridTooCoarse(_) => 3,
            _ => 2,
        }
    }
}
