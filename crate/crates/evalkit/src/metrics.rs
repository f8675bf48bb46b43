use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tco_core::geometry::{pointmap_gradients, surface_normals, to_world, unproject, DepthMap, Intrinsics, Pose};
use tco_core::priors::rotation_angle;

use crate::error::{EvalError, Result};
use crate::icp::{icp_refine, median_spacing};
use crate::kdtree::KdTree;
use crate::sim3::{umeyama, umeyama_any, Sim3};

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, normals: Option<Vec<Vector3<f64>>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(EvalError::NonFinite("point"));
        }
        if let Some(n) = &normals {
            if n.len() != points.len() {
                return Err(EvalError::Mismatch { what: "normals per point", left: n.len(), right: points.len() });
            }
            if let Some((index, v)) = n.iter().enumerate().find(|(_, v)| !((v.norm() - 1.0).abs() <= UNIT_TOL)) {
                return Err(EvalError::NotUnit { index, norm: v.norm() });
            }
        }
        Ok(Self { points, normals })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &Sim3) -> Self {
        Self {
            points: t.apply_all(&self.points),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| t.rotation * v).collect()),
        }
    }

    /// At most `max` points, chosen uniformly without replacement.
    pub fn subsample(&self, max: usize, seed: u64) -> Self {
        if self.len() <= max {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), max).into_vec();
        idx.sort_unstable();
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|n| idx.iter().map(|&i| n[i]).collect()),
        }
    }
}

/// Median, averaging the middle pair for even counts. Sorts `values`.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointmapMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
}

/// Distances from each `from` point to its nearest `to` point and the
/// absolute cosine between their normals.
fn one_way(from: &PointCloud, to: &PointCloud, tree: &KdTree) -> (Vec<f64>, Vec<f64>) {
    let (fnorm, tnorm) = (from.normals().expect("checked"), to.normals().expect("checked"));
    let mut dist = Vec::with_capacity(from.len());
    let mut cos = Vec::with_capacity(from.len());
    for (p, n) in from.points().iter().zip(fnorm) {
        let (j, d) = tree.nearest(p).expect("nonempty");
        dist.push(d.sqrt());
        cos.push(n.dot(&tnorm[j]).abs().min(1.0));
    }
    (dist, cos)
}

/// Accuracy (pred to gt), completion (gt to pred) and normal consistency,
/// the latter averaged over both matching directions. Clouds must already be
/// aligned and carry normals.
pub fn pointmap_metrics(pred: &PointCloud, gt: &PointCloud) -> Result<PointmapMetrics> {
    if pred.is_empty() {
        return Err(EvalError::Empty("predicted cloud"));
    }
    if gt.is_empty() {
        return Err(EvalError::Empty("ground-truth cloud"));
    }
    if pred.normals().is_none() || gt.normals().is_none() {
        return Err(EvalError::Empty("normal set"));
    }
    let (mut acc, mut nc_p) = one_way(pred, gt, &KdTree::new(gt.points()));
    let (mut comp, mut nc_g) = one_way(gt, pred, &KdTree::new(pred.points()));
    let nc_mean = 0.5 * (mean(&nc_p) + mean(&nc_g));
    Ok(PointmapMetrics {
        acc_mean: mean(&acc),
        acc_median: median(&mut acc),
        comp_mean: mean(&comp),
        comp_median: median(&mut comp),
        nc_mean,
        nc_median: 0.5 * (median(&mut nc_p) + median(&mut nc_g)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub ate: f64,
    pub rpe_trans: f64,
    /// Degrees.
    pub rpe_rot: f64,
}

/// ATE after Sim(3)-aligning predicted camera centers to ground truth, and
/// RPE over consecutive pairs of the aligned trajectory.
pub fn trajectory_metrics(pred: &[Pose], gt: &[Pose]) -> Result<TrajectoryMetrics> {
    if pred.len() != gt.len() {
        return Err(EvalError::Mismatch { what: "trajectory poses", left: pred.len(), right: gt.len() });
    }
    if pred.len() < 2 {
        return Err(EvalError::Empty("trajectory with two poses"));
    }
    let pc: Vec<Vector3<f64>> = pred.iter().map(Pose::center).collect();
    let gc: Vec<Vector3<f64>> = gt.iter().map(Pose::center).collect();
    let sim = umeyama_any(&pc, &gc)?;
    let aligned = pred.iter().map(|p| sim.apply_pose(p)).collect::<Result<Vec<_>>>()?;
    let ate = (aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a.center() - g.center()).norm_squared())
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt();
    let mut tsq = 0.0;
    let mut rsq = 0.0;
    for i in 0..pred.len() - 1 {
        let rp = aligned[i].inverse().compose(&aligned[i + 1]);
        let rg = gt[i].inverse().compose(&gt[i + 1]);
        tsq += (rp.translation() - rg.translation()).norm_squared();
        rsq += rotation_angle(&rp, &rg).to_degrees().powi(2);
    }
    let m = (pred.len() - 1) as f64;
    Ok(TrajectoryMetrics { ate, rpe_trans: (tsq / m).sqrt(), rpe_rot: (rsq / m).sqrt() })
}

/// World-frame points and normals of one view; `None` where either is undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGeometry {
    pub samples: Vec<Option<(Vector3<f64>, Vector3<f64>)>>,
}

impl ViewGeometry {
    pub fn new(depth: &DepthMap, pose: &Pose, k: &Intrinsics) -> Result<Self> {
        let pm = to_world(&unproject(depth, k)?, pose)?;
        let (gx, gy) = pointmap_gradients(&pm)?;
        let nm = surface_normals(&gx, &gy)?;
        let (p, n) = (pm.points.data(), nm.normals.data());
        let samples = (0..pm.mask.len())
            .map(|i| {
                (pm.mask[i] && nm.mask[i]).then(|| {
                    (
                        Vector3::new(p[3 * i], p[3 * i + 1], p[3 * i + 2]),
                        Vector3::new(n[3 * i], n[3 * i + 1], n[3 * i + 2]),
                    )
                })
            })
            .collect();
        Ok(Self { samples })
    }
}

fn gather(views: &[ViewGeometry]) -> Result<PointCloud> {
    let (points, normals): (Vec<_>, Vec<_>) = views.iter().flat_map(|v| v.samples.iter().flatten().copied()).unzip();
    PointCloud::new(points, Some(normals))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub icp_iters: usize,
    /// ICP inlier distance in multiples of the ground truth's median point spacing.
    pub inlier_factor: f64,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { icp_iters: 50, inlier_factor: 5.0, max_points: 50_000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointmapEval {
    pub metrics: PointmapMetrics,
    pub alignment: Sim3,
    pub inlier_dist: f64,
    pub icp_rms: Vec<f64>,
}

/// Align predicted to ground-truth point maps (Umeyama on pixel
/// correspondences, then ICP) and measure them.
pub fn evaluate_pointmaps(pred: &[ViewGeometry], gt: &[ViewGeometry], cfg: &EvalConfig) -> Result<PointmapEval> {
    if pred.len() != gt.len() {
        return Err(EvalError::Mismatch { what: "views", left: pred.len(), right: gt.len() });
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        if p.samples.len() != g.samples.len() {
            return Err(EvalError::Mismatch { what: "pixels", left: p.samples.len(), right: g.samples.len() });
        }
        for (a, b) in p.samples.iter().zip(&g.samples) {
            if let (Some(a), Some(b)) = (a, b) {
                src.push(a.0);
                dst.push(b.0);
            }
        }
    }
    let init = umeyama(&src, &dst)?;
    let pred_cloud = gather(pred)?.subsample(cfg.max_points, cfg.seed);
    let gt_cloud = gather(gt)?.subsample(cfg.max_points, cfg.seed.wrapping_add(1));
    let inlier_dist = cfg.inlier_factor * median_spacing(gt_cloud.points())?;
    let icp = icp_refine(pred_cloud.points(), gt_cloud.points(), init, cfg.icp_iters, inlier_dist)?;
    let metrics = pointmap_metrics(&pred_cloud.transformed(&icp.transform), &gt_cloud)?;
    Ok(PointmapEval { metrics, alignment: icp.transform, inlier_dist, icp_rms: icp.rms })
}
