use std::io;

use thiserror::Error;

pub type Result<T, E = SrplError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SrplError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at step {step} (offending parameter group: {group})")]
    Numeric { step: usize, group: String },

    #[error("missing input: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SrplError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SrplError::Contract(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        SrplError::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        SrplError::Format(msg.into())
    }
}
