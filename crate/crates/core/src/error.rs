use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the face engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate triangle {index} (area {area:e})")]
    DegenerateTriangle { index: usize, area: f64 },

    #[error("zero-length neutral edge ({a}, {b})")]
    ZeroLengthEdge { a: usize, b: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("overlapping UV triangles {first} and {second} at texel ({x}, {y})")]
    UvOverlap {
        first: usize,
        second: usize,
        x: usize,
        y: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid model bundle: {0}")]
    Bundle(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },
}

impl Error {
    /// True for failures caused by numerics rather than by bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateTriangle { .. }
                | Error::ZeroLengthEdge { .. }
                | Error::Degenerate(_)
                | Error::NonFinite(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}
