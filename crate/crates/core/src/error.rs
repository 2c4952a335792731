use thiserror::Error;

/// Errors raised by the numerical library and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("infinite mass: alpha = {alpha} must exceed n/2 = {half_dim}")]
    InfiniteMass { alpha: f64, half_dim: f64 },

    #[error("derivative unavailable: {0}")]
    DerivativeUnavailable(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid misalignment: {0}")]
    GridMisalignment(String),

    #[error("mismatched ensembles: {0}")]
    Mismatch(String),

    #[error("missing estimate: {0}")]
    MissingEstimate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
