use thiserror::Error;

/// Errors produced by the compression library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("budget exceeds dimension: budget {budget}, dimension {dim}")]
    BudgetExceedsDimension { budget: usize, dim: usize },

    #[error("codebook size {k} is invalid for {len} values")]
    InvalidCodebookSize { k: usize, len: usize },

    #[error("rank {rank} out of range (max {max})")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("optimizer diverged: loss {loss} at epoch {epoch}")]
    Divergence { loss: f64, epoch: usize },

    #[error("malformed container: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors that come from numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
