use std::path::PathBuf;

use thiserror::Error;

use crate::formula::ParseError;

/// Coarse failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid formula: {0}")]
    Formula(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("design error: {0}")]
    Design(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse(_) | Error::Formula(_) | Error::Config(_) => ErrorClass::Usage,
            Error::Io { .. } | Error::Csv { .. } | Error::Data(_) | Error::Design(_) | Error::Json(_) => {
                ErrorClass::Data
            }
            Error::Numerical(_) => ErrorClass::Numerical,
        }
    }

    /// Prefixes the message while keeping the class.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Formula(m) => Error::Formula(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Design(m) => Error::Design(format!("{ctx}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
