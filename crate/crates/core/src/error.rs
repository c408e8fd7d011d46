use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("instance too large for {op}: n = {n} exceeds cap {cap}")]
    TooLarge {
        op: &'static str,
        n: usize,
        cap: usize,
    },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("class {class} has {have} members, needs at least {need}")]
    ClassTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::InvalidParam(_) => "invalid-param",
            Error::TooLarge { .. } => "too-large",
            Error::Empty(_) => "empty",
            Error::ClassTooSmall { .. } => "class-too-small",
            Error::Parse { .. } => "parse",
            Error::Dataset(_) => "dataset",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
