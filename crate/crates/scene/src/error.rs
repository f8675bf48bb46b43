use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Core(#[from] tco_core::Error),
    #[error(transparent)]
    Autodiff(#[from] tco_autodiff::AdError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("view {view} sees too little of the scene ({coverage:.0}% coverage)")]
    NoCoverage { view: usize, coverage: f64 },
}

pub type Result<T> = std::result::Result<T, SceneError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SceneError {
    let path = path.into();
    move |source| SceneError::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, detail: impl Into<String>) -> SceneError {
    SceneError::Format { path: path.into(), detail: detail.into() }
}
