//! Seeded corruption of pose and intrinsics priors.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tco_core::geometry::{Intrinsics, Pose};
use tco_core::priors::PriorSet;

use crate::error::{format_err, Result, SceneError};
use crate::io::{read_json, write_json};

/// Perturbation magnitudes. Translation and focal amounts are percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub rot_deg: f64,
    pub trans_pct: f64,
    pub focal_pct: f64,
}

impl Noise {
    pub fn new(rot_deg: f64, trans_pct: f64, focal_pct: f64) -> Result<Self> {
        let n = Self { rot_deg, trans_pct, focal_pct };
        if [rot_deg, trans_pct, focal_pct].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SceneError::Spec(format!("noise magnitudes must be nonnegative, got {n:?}")));
        }
        if focal_pct >= 100.0 {
            return Err(SceneError::Spec(format!("focal perturbation {focal_pct}% would flip the focal sign")));
        }
        Ok(n)
    }

    pub fn is_zero(&self) -> bool {
        self.rot_deg == 0.0 && self.trans_pct == 0.0 && self.focal_pct == 0.0
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if let Some(u) = Unit::try_new(v, 1e-9) {
            return u;
        }
    }
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Rotate each pose about a random axis by exactly `rot_deg` and shift its
/// translation by `trans_pct` percent of its length in a random direction.
pub fn perturb_poses(poses: &[Pose], noise: &Noise, rng: &mut ChaCha8Rng) -> Result<Vec<Pose>> {
    poses
        .iter()
        .map(|p| {
            let axis = unit_vector(rng);
            let dir = unit_vector(rng);
            let r: Matrix3<f64> = Rotation3::from_axis_angle(&axis, noise.rot_deg.to_radians()).into_inner();
            let t = p.translation() + dir.into_inner() * (noise.trans_pct / 100.0 * p.translation().norm());
            Ok(Pose::new(r * p.rotation(), t)?)
        })
        .collect()
}

/// Scale each focal length by `1 ± focal_pct` percent with a random sign.
pub fn perturb_intrinsics(ks: &[Intrinsics], noise: &Noise, rng: &mut ChaCha8Rng) -> Result<Vec<Intrinsics>> {
    ks.iter()
        .map(|k| {
            let fx = k.fx * (1.0 + sign(rng) * noise.focal_pct / 100.0);
            let fy = k.fy * (1.0 + sign(rng) * noise.focal_pct / 100.0);
            Ok(k.with_focal(fx, fy)?)
        })
        .collect()
}

/// Perturb the pose and intrinsics priors of `priors`; depth priors pass
/// through. Poses are perturbed in the first view's frame.
pub fn perturb_priors(priors: &PriorSet, noise: &Noise, seed: u64) -> Result<PriorSet> {
    let noise = Noise::new(noise.rot_deg, noise.trans_pct, noise.focal_pct)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = priors.clone();
    if let Some(p) = priors.poses() {
        out = out.with_anchored_poses(perturb_poses(p, &noise, &mut rng)?)?;
    }
    if let Some(k) = priors.intrinsics() {
        out = out.with_intrinsics(perturb_intrinsics(k, &noise, &mut rng)?)?;
    }
    Ok(out)
}

/// On-disk perturbed priors. Poses are in the first view's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub noise: Noise,
    pub seed: u64,
    pub poses: Option<Vec<[[f64; 4]; 3]>>,
    pub intrinsics: Option<Vec<[f64; 2]>>,
}

impl PriorFile {
    pub fn from_priors(priors: &PriorSet, noise: Noise, seed: u64) -> Self {
        Self {
            noise,
            seed,
            poses: priors.poses().map(|p| p.iter().map(Pose::to_rows).collect()),
            intrinsics: priors.intrinsics().map(|k| k.iter().map(|k| [k.fx, k.fy]).collect()),
        }
    }

    /// Overlay the stored priors on `base`. `sizes` holds each view's `(width, height)`.
    pub fn apply(&self, base: PriorSet, sizes: &[(usize, usize)], path: &Path) -> Result<PriorSet> {
        let mut out = base;
        if let Some(rows) = &self.poses {
            let poses = rows
                .iter()
                .map(Pose::from_rows)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(path, e.to_string()))?;
            out = out.with_anchored_poses(poses)?;
        }
        if let Some(f) = &self.intrinsics {
            if f.len() != sizes.len() {
                return Err(format_err(path, format!("{} intrinsics for {} views", f.len(), sizes.len())));
            }
            let ks = f
                .iter()
                .zip(sizes)
                .map(|(f, &(w, h))| Intrinsics::new(f[0], f[1], w, h))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(path, e.to_string()))?;
            out = out.with_intrinsics(ks)?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
