use std::path::PathBuf;

pub type Result<T, E = IoError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// A data or checkpoint file is truncated or malformed at `offset`.
    #[error("{path}: integrity error at byte {offset}: {detail}")]
    Integrity { path: PathBuf, offset: u64, detail: String },
    #[error("format error: {0}")]
    Format(String),
    /// Existing artifacts would be overwritten or mixed.
    #[error("refusing to continue: {0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] robustnet_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("external command: {0}")]
    External(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> IoError {
    let path = path.into();
    move |source| IoError::Io { path, source }
}
