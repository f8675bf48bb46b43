use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{what}: {left} vs {right} items")]
    Mismatch { what: &'static str, left: usize, right: usize },
    #[error("correspondences are degenerate (covariance rank {rank})")]
    RankDeficient { rank: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("normal {index} is not unit length ({norm})")]
    NotUnit { index: usize, norm: f64 },
    #[error(transparent)]
    Core(#[from] tco_core::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
