use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scene(#[from] tco_scene::SceneError),
    #[error(transparent)]
    Core(#[from] tco_core::Error),
    #[error(transparent)]
    Eval(#[from] tco_evalkit::EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("scene {0} has no ground truth to evaluate against")]
    NoGroundTruth(PathBuf),
    #[error("{0} prior requested but the scene provides none")]
    MissingPrior(&'static str),
    #[error("non-finite {0} in report")]
    NonFinite(String),
    #[error("report does not reproduce: {0}")]
    Verify(String),
}

impl CliError {
    /// 1 for usage errors, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
