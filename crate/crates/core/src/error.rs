use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so a caller (the CLI in particular) can map them to
/// coarse failure classes: configuration, data, or numeric.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("cannot encode image {path}: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("shape mismatch: {context} (expected {expected}, got {actual})")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("image too small: {context}")]
    TooSmall { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{metric} is undefined here: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: u64 },

    #[error("weights container: {0}")]
    Container(String),

    #[error("container version mismatch: file has v{found}, reader supports v{supported}")]
    ContainerVersion { found: u32, supported: u32 },

    #[error("container checksum mismatch (file is truncated or corrupt)")]
    ContainerChecksum,

    #[error("missing mask for pair {pair}")]
    MissingMask { pair: String },

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn shape_mismatch(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// True for errors caused by the input data rather than by the caller's
    /// configuration (used by the CLI to pick exit codes).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Decode { .. }
                | Error::Encode { .. }
                | Error::ShapeMismatch { .. }
                | Error::TooSmall { .. }
                | Error::Container(_)
                | Error::ContainerVersion { .. }
                | Error::ContainerChecksum
                | Error::MissingMask { .. }
        )
    }

    /// True for numeric failures (undefined metrics, divergence).
    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::UndefinedMetric { .. } | Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
