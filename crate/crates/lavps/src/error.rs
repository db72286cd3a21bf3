//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by schedule construction, oracle evaluation, sampling,
/// training, serialization and the benchmark harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration key failed validation. The message names the key and
    /// the offending value.
    #[error("config error: key `{key}`: {message}")]
    Config { key: String, message: String },

    /// A numeric quantity became non-finite; `term` names the failing term.
    #[error("non-finite value in term `{term}`{detail}")]
    NonFinite { term: String, detail: String },

    /// Dimension mismatch between interacting objects.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Training aborted (divergence or a non-finite loss).
    #[error("training aborted at step {step}: {message}")]
    TrainingAborted { step: usize, message: String },

    /// A sampler run aborted; the partial trace is attached as JSON lines.
    #[error("sampler aborted: {message}")]
    SamplerAborted { message: String, trace_jsonl: String },

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn non_finite(term: impl Into<String>) -> Self {
        Error::NonFinite {
            term: term.into(),
            detail: String::new(),
        }
    }

    pub fn non_finite_with(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            term: term.into(),
            detail: format!(" ({})", detail.into()),
        }
    }
}
