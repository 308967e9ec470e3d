use std::path::PathBuf;

use capsnet3d_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{}:{line}: {msg}", file.display())]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("checkpoint load failed: {0}")]
    Load(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than by a run going wrong.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Argument(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
