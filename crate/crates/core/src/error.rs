use std::path::PathBuf;

/// Errors raised by the simulation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("hour index {step} out of range for a {horizon}-step profile")]
    StepOutOfRange { step: usize, horizon: usize },

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("unknown agent `{0}`")]
    UnknownAgent(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("data error in {file}: {message}")]
    Data { file: PathBuf, message: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn data(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            file: file.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the configuration rather than the data it points at.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
