use thiserror::Error;

use crate::paths::PathTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("metric with n = {n} weights exceeds the dense cap of {cap}; use the matrix-free quadratic form instead")]
    Capacity { n: usize, cap: usize },

    #[error("no convergence after {steps} steps: {reason}")]
    NonConvergence {
        steps: usize,
        reason: String,
        partial: Option<Box<PathTrace>>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }

    /// Process exit code for the failure class: 2 invalid input, 3 numerical
    /// failure, 4 non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Format(_)
            | Error::Degenerate(_)
            | Error::Capacity { .. }
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::NumericalFailure(_) | Error::Singular(_) => 3,
            Error::NonConvergence { .. } => 4,
        }
    }
}
