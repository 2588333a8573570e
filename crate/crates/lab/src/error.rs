use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a valid archive: {reason}")]
    Archive { path: PathBuf, reason: String },
    #[error("checkpoint field `{0}` is missing or malformed")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] socm_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// Problems with the requested run rather than with its execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            LabError::Config(_) | LabError::Core(socm_core::Error::Config(_) | socm_core::Error::UnsupportedSetting(_))
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
