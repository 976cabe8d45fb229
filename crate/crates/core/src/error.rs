use thiserror::Error;

/// Errors raised by the particle engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unknown initial distribution `{0}`")]
    UnknownDistribution(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("custom surrogate has no function bound")]
    UnboundSurrogate,

    #[error("density grids do not share the same evaluation points")]
    GridMismatch,

    #[error("non-finite particle state detected at step {step}")]
    NonFinite { step: u64 },

    #[error("inconsistent coupled run: {0}")]
    Inconsistent(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
