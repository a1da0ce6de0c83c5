use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Format,
    Shape,
    Numeric,
    Capacity,
    Config,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("size mismatch: expected {expected} bytes, found {actual}")]
    Size { expected: u64, actual: u64 },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no convergence after {iterations} iterations")]
    Convergence { iterations: usize, best: Vec<f64> },

    #[error("numeric failure at iteration {iteration}: {detail}")]
    Numeric { iteration: usize, detail: String },

    #[error("{count} pixel failures, first at (row {row}, col {col}): {first}")]
    PixelFailures {
        count: usize,
        row: usize,
        col: usize,
        first: Box<Error>,
    },

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("training diverged at step {step}; network restored to the last finite state")]
    Divergence { step: usize },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: String, expected: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Format { .. } | Error::Size { .. } | Error::NonFinite { .. } => {
                ErrorClass::Format
            }
            Error::Version { .. } => ErrorClass::Format,
            Error::Shape(_) => ErrorClass::Shape,
            Error::Degenerate(_)
            | Error::Convergence { .. }
            | Error::Numeric { .. }
            | Error::Divergence { .. } => ErrorClass::Numeric,
            Error::PixelFailures { first, .. } => first.class(),
            Error::Capacity(_) => ErrorClass::Capacity,
            Error::Config(_) => ErrorClass::Config,
            Error::Stage { source, .. } => source.class(),
        }
    }
}
