use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the generation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: found {found:?}, expected one of {expected:?}")]
    Syntax {
        offset: usize,
        found: String,
        expected: Vec<String>,
    },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("prompt has {count} tokens, limit is {limit}")]
    Length { count: usize, limit: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("adapter was trained against base {expected}, got base {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("need at least {needed} items, got {got}")]
    Count { needed: usize, got: usize },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

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
}
