use std::path::PathBuf;

use sfd_core::SfdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] SfdError),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("{what}: {source}")]
    Parse { what: String, source: Box<dyn std::error::Error + Send + Sync> },

    #[error("missing {0}")]
    Missing(PathBuf),

    #[error("training aborted at step {step}: {cause}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Aborted { step: u64, cause: String, last_good: Option<PathBuf> },

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, LabError>;

pub fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}

pub(crate) fn contract(msg: impl Into<String>) -> LabError {
    LabError::Core(SfdError::Contract(msg.into()))
}
