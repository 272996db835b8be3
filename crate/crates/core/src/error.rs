//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input was outside its valid domain (non-finite, wrong range).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A file or byte stream did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Loaded data violated a value-level contract (e.g. NaN position).
    #[error("validation error: {0}")]
    Validation(String),

    /// Two inputs that must agree (shapes, degrees, cardinalities) did not.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    Empty(String),

    /// An optimization loop produced a non-finite loss.
    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
