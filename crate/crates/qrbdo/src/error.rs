//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, QrbdoError>;

#[derive(Debug, Error)]
pub enum QrbdoError {
    /// Invalid distribution or model parameters.
    #[error("invalid parameterization: {0}")]
    Parameterization(String),

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent run or problem configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric routine failed to converge or produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Kriging hyperparameter fit failed for every start.
    #[error("kriging fit failed: {0}")]
    Fit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
