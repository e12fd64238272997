use thiserror::Error;

use crate::pow::Puzzle;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("trace was produced by a different network state; rerun forward")]
    StaleTrace,

    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unknown account `{0}`")]
    UnknownAccount(String),

    #[error("access denied: proof of work required (difficulty {} bits)", .0.difficulty_bits)]
    AccessDenied(Puzzle),

    #[error("proof-of-work search exhausted after {0} attempts")]
    Exhausted(u64),

    #[error("representation adapter required: suspect dim {suspect} != predictor input dim {expected}")]
    AdapterRequired { suspect: usize, expected: usize },

    #[error("{0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
