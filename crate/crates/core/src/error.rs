use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error in {op} at index {index}: {detail}")]
    Numeric {
        op: &'static str,
        index: usize,
        detail: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parameter domain error: {0}")]
    Domain(String),

    #[error("degenerate range at site {site}: min == max == {value}")]
    DegenerateRange { site: String, value: f64 },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("optimizer step rejected: non-finite gradient in parameter {param} at index {index}")]
    NonFiniteGradient { param: usize, index: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
