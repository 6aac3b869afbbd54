use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("wealth must be positive for log utility, got {0}")]
    NonPositiveWealth(f64),

    /// The truncation window sits so far in a tail that its Gaussian mass underflows.
    #[error("degenerate truncation window: normalizer {0:e} below 1e-300")]
    DegenerateSupport(f64),

    #[error("value function is not concave in wealth (vxx = {0})")]
    NotConcave(f64),

    #[error("action {action} lies outside the policy support [{lower}, {upper}]")]
    OutsideSupport { action: f64, lower: f64, upper: f64 },

    #[error("support of the first distribution is not contained in the second")]
    SupportMismatch,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("trajectory carries no sampled actions")]
    MissingActions,

    #[error("negative variance coefficient {0}")]
    NegativeVariance(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged at iteration {iteration}: parameter magnitude {magnitude:e}")]
    Divergence { iteration: usize, magnitude: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
