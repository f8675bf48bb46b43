use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};
use crate::kdtree::KdTree;
use crate::sim3::{umeyama, Sim3};

pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: Sim3,
    /// Inlier RMS before the first and after each accepted iteration.
    pub rms: Vec<f64>,
}

/// Nearest-neighbor spacing: median distance from each point to its nearest
/// other point.
pub fn median_spacing(points: &[Vector3<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(EvalError::Empty("point cloud with two points"));
    }
    let mut d = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut best = f64::INFINITY;
        // a tree over the others would be faster; the clouds here are small
        for (j, q) in points.iter().enumerate() {
            if i != j {
                best = best.min((p - q).norm_squared());
            }
        }
        d.push(best.sqrt());
    }
    Ok(crate::metrics::median(&mut d))
}

struct Matches {
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
    rms: f64,
}

fn matches(tree: &KdTree, target: &[Vector3<f64>], source: &[Vector3<f64>], t: &Sim3, gate: f64) -> Matches {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut sq = 0.0;
    for p in source {
        let q = t.apply(p);
        if let Some((j, d)) = tree.nearest(&q) {
            if d <= gate * gate {
                src.push(*p);
                dst.push(target[j]);
                sq += d;
            }
        }
    }
    let rms = if src.is_empty() { f64::INFINITY } else { (sq / src.len() as f64).sqrt() };
    Matches { src, dst, rms }
}

/// Point-to-point ICP with distance-gated correspondences and Sim(3) re-fits.
/// An iteration is kept only when it lowers the inlier RMS, so the recorded
/// RMS never increases.
pub fn icp_refine(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    init: Sim3,
    iters: usize,
    inlier_dist: f64,
) -> Result<IcpResult> {
    if source.is_empty() {
        return Err(EvalError::Empty("source cloud"));
    }
    if target.is_empty() {
        return Err(EvalError::Empty("target cloud"));
    }
    let tree = KdTree::new(target);
    let mut current = init;
    let mut m = matches(&tree, target, source, &current, inlier_dist);
    if m.src.is_empty() {
        warn!("icp: no correspondences within {inlier_dist} at the initial alignment");
        return Ok(IcpResult { transform: init, rms: Vec::new() });
    }
    let mut rms = vec![m.rms];
    for _ in 0..iters {
        let Ok(next) = umeyama(&m.src, &m.dst) else { break };
        let n = matches(&tree, target, source, &next, inlier_dist);
        if !(n.rms < m.rms - MIN_IMPROVEMENT) || n.src.len() < 3 {
            break;
        }
        current = next;
        rms.push(n.rms);
        m = n;
    }
    Ok(IcpResult { transform: current, rms })
}
