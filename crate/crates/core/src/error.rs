//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by geometry, flow, registration, transport and I/O code.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition (shape mismatch,
    /// non-positive bandwidth, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data is structurally unusable (open mesh, bad topology, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical computation produced non-finite values or failed to
    /// reach a usable state.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// The ejection fraction could not be matched within the configured
    /// tolerance after scaling optimization.
    #[error("ejection fraction mismatch after scaling: residual {residual:.6}")]
    EfMismatch { residual: f64 },

    /// A file could not be parsed; `line` is 1-based.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Too few samples for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
