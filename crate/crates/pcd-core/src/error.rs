//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. The variants map onto the CLI exit-code contract:
/// usage/configuration problems, bad data, and numeric failures are kept
/// distinct so callers can react differently to each.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, invalid settings, mismatched trees.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or out-of-contract input data (manifests, annotations, files).
    #[error("data error: {0}")]
    Data(String),
    /// NaN/Inf encountered, degenerate statistics, diverging optimization.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
