//! Crate-wide error type.
//!
//! Exit-code mapping for the CLI lives in `cli`: config/usage problems map to 1,
//! data and format problems to 2, numeric failures to 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is invalid or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is malformed or inconsistent with its declared header.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced NaN/Inf or exceeded a numeric tolerance.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A serialized file (checkpoint, dataset) is structurally invalid.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
