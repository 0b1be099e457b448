use std::fmt;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing configuration key `{0}`")]
    MissingKey(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("singular point: x coincides with y")]
    SingularPoint,

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("rejection sampling gave up after {attempts} attempts")]
    SamplingFailed { attempts: usize },

    #[error("{method} breakdown at iteration {iteration}")]
    Breakdown { method: &'static str, iteration: usize },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that come from the numerics (divergence, breakdown,
    /// non-finite values) rather than from the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Divergence { .. }
                | Error::Breakdown { .. }
                | Error::Factorization(_)
                | Error::Eigen(_)
                | Error::SamplingFailed { .. }
        )
    }

    pub(crate) fn non_finite(context: impl fmt::Display) -> Self {
        Error::NonFinite { context: context.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn non_finite(context: impl fmt::Display) -> Error {
    Error::non_finite(context)
}
