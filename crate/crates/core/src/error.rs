//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by schedule construction, Gaussian algebra, inference
/// routines, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (domain errors).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two values that must have matching lengths do not.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An optimization produced a non-finite value; `term` names the first
    /// offending loss component.
    #[error("divergence at step {step}: {term} is not finite")]
    Divergence { step: usize, term: &'static str },

    /// Configuration file errors (parse failures keep the toml diagnostics,
    /// which include line/column positions).
    #[error("config error: {0}")]
    Config(String),

    /// A file referenced by the config or CLI is missing or malformed.
    #[error("{0}")]
    FileFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns `Err(Error::InvalidArgument(...))` unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::InvalidArgument(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;

/// Returns `Err(Error::ShapeMismatch { .. })` unless the two lengths agree.
macro_rules! ensure_len {
    ($context:expr, $expected:expr, $got:expr) => {
        if $expected != $got {
            return Err($crate::error::Error::ShapeMismatch {
                context: $context,
                expected: $expected,
                got: $got,
            });
        }
    };
}
pub(crate) use ensure_len;
