use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("matrix is not positive definite (failed pivot {pivot}, value {value:e})")]
    Conditioning { pivot: usize, value: f64 },

    #[error("index {index} out of range for group {group} with {radix} codes")]
    IndexBounds { group: usize, index: u64, radix: usize },

    #[error("invalid group layout: {0}")]
    Layout(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("non-finite loss at step {step}; last good checkpoint written to {}", dump.display())]
    NonFinite { step: u64, dump: PathBuf },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
