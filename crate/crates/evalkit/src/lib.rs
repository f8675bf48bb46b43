//! Similarity alignment, ICP and point-map / trajectory metrics.

pub mod error;
pub mod icp;
pub mod kdtree;
pub mod metrics;
pub mod sim3;

pub use error::{EvalError, Result};
pub use icp::{icp_refine, IcpResult};
pub use kdtree::KdTree;
pub use metrics::{
    evaluate_pointmaps, pointmap_metrics, trajectory_metrics, EvalConfig, PointCloud, PointmapEval, PointmapMetrics,
    TrajectoryMetrics, ViewGeometry,
};
pub use sim3::{umeyama, umeyama_any, Sim3};
