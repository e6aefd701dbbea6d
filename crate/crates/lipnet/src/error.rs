//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: String,
        right: String,
    },

    /// A tensor was constructed with an inconsistent or empty shape.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Convolution or pooling geometry does not produce a valid output.
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// Weight initialisation was asked for an unsupported shape.
    #[error("initialisation error: {0}")]
    Init(String),

    /// A backward pass was given a cache produced by a different layer.
    #[error("forward cache does not match layer kind {0}")]
    CacheMismatch(&'static str),

    /// Batch statistics cannot be computed (e.g. batch size 1 in train mode).
    #[error("degenerate batch statistics: {0}")]
    DegenerateBatchStats(String),

    /// A computation produced or was given a non-finite or invalid value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The training loss became non-finite.
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The explicit convolution matrix would exceed the oracle size cap.
    #[error("explicit matrix cap exceeded: {elements} input elements > cap {cap}")]
    SizeCapExceeded { elements: usize, cap: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A model document could not be decoded.
    #[error("model format error: {0}")]
    Format(String),

    #[error("unsupported model format version {found} (supported: {supported})")]
    Version { found: u64, supported: u64 },

    /// A CSV row could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub(crate) fn dims(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::DimensionMismatch {
            context,
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
