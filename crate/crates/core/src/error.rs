use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, XbmError>;

#[derive(Debug, Error)]
pub enum XbmError {
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checksum mismatch for {what}: expected {expected}, found {found}")]
    Checksum {
        what: String,
        expected: String,
        found: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl XbmError {
    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        XbmError::Shape {
            op,
            shapes: shapes.into(),
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        XbmError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XbmError::Io {
            path: path.into(),
            source,
        }
    }
}
