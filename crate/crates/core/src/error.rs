use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter: {0}")]
    MissingParameter(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable identifier, used by the CLI's `code: message` output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Shape(_) => "shape_error",
            Error::MissingParameter(_) => "missing_parameter",
            Error::Plan(_) => "plan_error",
            Error::Format(_) => "format_error",
            Error::Io { .. } => "io_error",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidSpec(format!($($arg)*)) };
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

pub(crate) use invalid;
pub(crate) use shape_err;
