use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("parse error at line {line}, field `{field}`: {detail}")]
    Parse {
        line: usize,
        field: String,
        detail: String,
    },

    #[error("config error at `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
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
