use tco_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("non-positive depth {value} at pixel ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize, value: f64 },
    #[error("point map of extent {height}x{width} is too small for finite differences")]
    DegenerateExtent { height: usize, width: usize },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("confidence {value} <= 1 at pixel ({x}, {y}) violates the exp+1 activation")]
    ConfidenceContract { x: usize, y: usize, value: f64 },
    #[error("frame is not orthonormal and right-handed (deviation {0:e})")]
    NonOrthonormalFrame(f64),
    #[error("degenerate depth prior alignment")]
    DegenerateAlignment,
    #[error("need at least {required} views, got {got}")]
    TooFewViews { required: usize, got: usize },
    #[error("empty objective: no enabled loss term")]
    EmptyObjective,
    #[error("missing prior: {0}")]
    MissingPrior(&'static str),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {component} at step {step}")]
    NonFinite { component: String, step: usize },
    #[error("training diverged at step {step} (seed {seed})")]
    Diverged { step: usize, seed: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
