use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the certification engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    /// A length-dependent quantity was requested for a sequence it is undefined on.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("mask has {mask} bits but sequence has {sequence} tokens")]
    LengthMismatch { mask: usize, sequence: usize },

    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    /// An exhaustive enumeration would exceed its configured budget.
    #[error("budget exceeded: {what} (limit {limit})")]
    BudgetExceeded { what: String, limit: usize },

    #[error("cannot satisfy bin threshold: no bin count gives every bin at least {min_count} samples")]
    UnsatisfiableBins { min_count: usize },

    #[error("classifier error: {0}")]
    Classifier(String),

    /// Connecting to or talking with a remote classifier failed.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("transport timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unsupported protocol version {found} (expected {expected})")]
    ProtocolVersion { found: u64, expected: u64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
