use std::io;
use std::path::PathBuf;

use drc_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid loop recipe: {0}")]
    InvalidRecipe(String),

    #[error("WAV format error in `{field}`: {detail}")]
    WavFormat { field: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("parameter `{param}` = {value} outside [{min}, {max}]")]
    Domain {
        param: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("size error: {0}")]
    Size(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn config(path: &str, message: impl Into<String>) -> Error {
        Error::Config {
            path: path.to_string(),
            message: message.into(),
        }
    }

    /// Numeric failures map to exit code 3 in the CLI.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}
