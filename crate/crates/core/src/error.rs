use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid quantization scheme: {0}")]
    InvalidScheme(String),

    #[error("value is not finite: {0}")]
    NonFinite(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("fixed-point overflow: {0}")]
    Overflow(String),

    #[error("fixed-point operands disagree on fractional bits ({0} vs {1})")]
    FracBitsMismatch(u32, u32),

    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),

    #[error("invalid label {label} (expected < {classes})")]
    InvalidLabel { label: usize, classes: usize },

    #[error("{0}")]
    Idx(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
