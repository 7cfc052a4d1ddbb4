//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the failure classes the CLI distinguishes:
/// configuration problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes.
    #[error("{op}: {detail}")]
    Shape {
        /// Name of the operation that rejected its inputs.
        op: &'static str,
        /// Human-readable description of the mismatch.
        detail: String,
    },

    /// Invalid configuration (bad field values, unsupported combinations).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or inconsistent dataset / manifest contents.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (non-finite loss or gradient, impossible statistics).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
