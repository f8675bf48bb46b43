use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use tco_core::geometry::Pose;

use crate::error::{EvalError, Result};

/// `p -> s R p + t`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_all(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    /// Move a camera-to-world pose by this transform; the rotation part only
    /// rotates, the scale acts on the camera center.
    pub fn apply_pose(&self, pose: &Pose) -> Result<Pose> {
        Ok(Pose::from_nearest_rotation(self.rotation * pose.rotation(), self.apply(pose.translation()))?)
    }

    /// Sum of squared residuals `Σ ‖s R p + t − q‖²`.
    pub fn residual(&self, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
        src.iter().zip(dst).map(|(p, q)| (self.apply(p) - q).norm_squared()).sum()
    }
}

fn check_pairs(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<()> {
    if src.len() != dst.len() {
        return Err(EvalError::Mismatch { what: "correspondences", left: src.len(), right: dst.len() });
    }
    if src.is_empty() {
        return Err(EvalError::Empty("correspondence set"));
    }
    if src.iter().chain(dst).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(EvalError::NonFinite("point"));
    }
    Ok(())
}

fn solve(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Sim3, usize) {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (p, q) in src.iter().zip(dst) {
        let (a, b) = (p - mu_s, q - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = svd.singular_values;
    let top = d.max();
    let rank = if top > 0.0 { d.iter().filter(|&&x| x > top * 1e-12).count() } else { 0 };
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis of the smallest singular value
        let (imin, _) = d.argmin();
        s[imin] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = if var_s > 0.0 { d.dot(&s) / var_s } else { 1.0 };
    let translation = mu_d - rotation * mu_s * scale;
    (Sim3 { scale, rotation, translation }, rank)
}

/// Least-squares similarity taking `src[i]` onto `dst[i]`, with reflection
/// correction. Fails unless the covariance has rank at least 2.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    check_pairs(src, dst)?;
    let (sim, rank) = solve(src, dst);
    if src.len() < 3 || rank < 2 {
        return Err(EvalError::RankDeficient { rank });
    }
    Ok(sim)
}

/// Like [`umeyama`] but returns some minimizer even for degenerate input,
/// such as two or collinear camera centers.
pub fn umeyama_any(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    check_pairs(src, dst)?;
    Ok(solve(src, dst).0)
}
