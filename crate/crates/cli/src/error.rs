use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },

    #[error("{0}: {1}")]
    File(PathBuf, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] bilevel::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("incompatible metric sets: {0}")]
    MixedMetrics(String),

    #[error("nothing to summarize: {0}")]
    Empty(String),

    #[error("download failed: {0}")]
    Download(String),

    #[error("checksum mismatch for {name}: expected {expected}, got {actual}")]
    Checksum {
        name: String,
        expected: String,
        actual: String,
    },
}

pub(crate) fn config_err(path: impl Into<String>, msg: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| CliError::File(path.into(), e))
    }
}
