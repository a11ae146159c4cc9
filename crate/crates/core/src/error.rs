use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates the documented domain of an operation.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Exact enumeration requested above the configured spin cap.
    #[error("exact enumeration of {n} spins exceeds cap {cap}; use the mcmc estimator")]
    EnumerationCap { n: usize, cap: usize },

    #[error("tree with {leaves} leaves exceeds the leaf cap {cap}")]
    TooManyLeaves { leaves: u128, cap: usize },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
