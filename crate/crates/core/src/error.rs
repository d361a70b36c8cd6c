use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("label error: label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shuffle error: marginal sampling needs a batch of at least 2, got {0}")]
    Shuffle(usize),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite loss at step {step}; last finite checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFinite {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
