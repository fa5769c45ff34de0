use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A noise level or time argument left its legal domain.
    #[error("noise level {0} outside [0, 1]")]
    NoiseLevelOutOfRange(f64),

    /// A reverse transition was requested with s >= t.
    #[error("reverse transition requires 0 <= s < t <= 1, got t={t}, s={s}")]
    InvalidTimePair { t: f64, s: f64 },

    /// A categorical distribution does not sum to 1 within tolerance.
    #[error("distribution sums to {sum}, expected 1 within {tol}")]
    Unnormalized { sum: f64, tol: f64 },

    /// Structural validation of an input failed.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument was out of range for the operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// NaN or Inf appeared in a numeric computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An exact oracle refused an instance too large to enumerate.
    #[error("instance too large for exact enumeration: {0}")]
    TooLarge(String),

    /// An observation has zero probability under the reference joint.
    #[error("impossible condition: {0}")]
    ImpossibleCondition(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
