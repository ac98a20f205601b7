//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported wav: {what} = {value} (expected {expected}) in {path}")]
    UnsupportedWav {
        path: PathBuf,
        what: &'static str,
        value: String,
        expected: String,
    },

    #[error("truncated or malformed wav file {path}: {detail}")]
    MalformedWav { path: PathBuf, detail: String },

    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },

    #[error("manifest {path} line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("degrade: {0}")]
    Degrade(String),

    #[error("codec: {0}")]
    Codec(String),

    #[error("conditioning encoder: {0}")]
    Cond(String),

    #[error("language model: {0}")]
    Lm(String),

    #[error("trainer: {0}")]
    Train(String),

    #[error("orchestrator stage {stage}: {detail}")]
    Stage { stage: &'static str, detail: String },

    #[error("eval: {0}")]
    Eval(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
