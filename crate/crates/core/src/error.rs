use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data that violates a documented invariant.
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("parse error in {source_name} at {position}: {detail}")]
    Parse {
        source_name: String,
        position: String,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub fn parse(
        source_name: impl Into<String>,
        position: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            position: position.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } => 3,
            Error::Numeric { .. } => 4,
            Error::Io { .. } => 5,
        }
    }

    /// Short machine-parseable tag for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Parse { .. } => "E_PARSE",
            Error::Numeric { .. } => "E_NUMERIC",
            Error::Io { .. } => "E_IO",
        }
    }
}
