//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation; names both shapes.
    #[error("dimension mismatch in {op}: left shape {left:?}, right shape {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation precondition or postcondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A size precondition failed (e.g. k > N, m > N).
    #[error("size error: {0}")]
    Size(String),

    /// An index (token id, target class) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A step sequence was not strictly increasing.
    #[error("ordering error: {0}")]
    Ordering(String),

    /// Invalid configuration (CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss (CLI exit code 3).
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    /// Checkpoint decode failure; names the offending field.
    #[error("checkpoint error in `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    /// An oracle-equivalence or bound check failed (CLI exit code 1).
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
