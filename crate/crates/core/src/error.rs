// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Everything that can go wrong inside msae.
#[derive(Debug, thiserror::Error)]
pub enum MsaeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate normalization scale: mean centered row norm {0:e} is below 1e-12")]
    DegenerateScale(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{path}: bad magic bytes, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated payload ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: header/payload length mismatch ({detail})")]
    LengthMismatch { path: PathBuf, detail: String },

    #[error("{path}: invalid contents ({detail})")]
    Format { path: PathBuf, detail: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MsaeError>;

impl MsaeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MsaeError::Io { path: path.into(), source }
    }

    /// True for errors caused by malformed files or data rather than by
    /// numerical breakdown or bad arguments.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            MsaeError::BadMagic { .. }
                | MsaeError::UnsupportedVersion { .. }
                | MsaeError::Truncated { .. }
                | MsaeError::LengthMismatch { .. }
                | MsaeError::Format { .. }
                | MsaeError::Io { .. }
                | MsaeError::Json(_)
                | MsaeError::Validation(_)
                | MsaeError::NotFound(_)
                | MsaeError::Shape(_)
                | MsaeError::NonFinite(_)
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(
            self,
            MsaeError::Numeric(_) | MsaeError::DegenerateScale(_) | MsaeError::Degenerate(_)
        )
    }
}
