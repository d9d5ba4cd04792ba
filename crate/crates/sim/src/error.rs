use std::path::PathBuf;

use fedmac_core::config::ConfigError;
use fedmac_core::federation::FederationError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Federation(FederationError),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    /// 2 for configuration or usage problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<FederationError> for Error {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::Config(c) => c.into(),
            other => Error::Federation(other),
        }
    }
}
