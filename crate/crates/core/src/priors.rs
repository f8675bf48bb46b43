//! Penalty terms that tie predictions to known poses, intrinsics and depths.

use log::warn;
use tco_autodiff::{concat, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, Pose};

/// Floor on the trajectory scale.
pub const SCALE_EPS: f64 = 1e-8;

/// Optional per-view priors. Pose priors are stored relative to the first view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorSet {
    poses: Option<Vec<Pose>>,
    intrinsics: Option<Vec<Intrinsics>>,
    depths: Option<Vec<DepthMap>>,
}

impl PriorSet {
    pub fn new(
        n_views: usize,
        poses: Option<Vec<Pose>>,
        intrinsics: Option<Vec<Intrinsics>>,
        depths: Option<Vec<DepthMap>>,
    ) -> Result<Self> {
        let check = |name: &str, len: Option<usize>| match len {
            Some(l) if l != n_views => Err(Error::Shape(format!(
                "{name} prior covers {l} views, scene has {n_views}"
            ))),
            _ => Ok(()),
        };
        check("pose", poses.as_ref().map(Vec::len))?;
        check("intrinsics", intrinsics.as_ref().map(Vec::len))?;
        check("depth", depths.as_ref().map(Vec::len))?;
        let poses = poses.map(|p| anchor_to_first(&p));
        Ok(Self { poses, intrinsics, depths })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn poses(&self) -> Option<&[Pose]> {
        self.poses.as_deref()
    }

    pub fn intrinsics(&self) -> Option<&[Intrinsics]> {
        self.intrinsics.as_deref()
    }

    pub fn depths(&self) -> Option<&[DepthMap]> {
        self.depths.as_deref()
    }

    pub fn without_poses(mut self) -> Self {
        self.poses = None;
        self
    }

    pub fn without_intrinsics(mut self) -> Self {
        self.intrinsics = None;
        self
    }

    /// Replace the pose prior with poses already expressed in the first
    /// view's frame. They are taken as given, without re-anchoring.
    pub fn with_anchored_poses(mut self, poses: Vec<Pose>) -> Result<Self> {
        let expected = self
            .intrinsics
            .as_ref()
            .map(Vec::len)
            .or(self.depths.as_ref().map(Vec::len))
            .or(self.poses.as_ref().map(Vec::len));
        if let Some(n) = expected.filter(|&n| n != poses.len()) {
            return Err(Error::Shape(format!("pose prior covers {} views, scene has {n}", poses.len())));
        }
        self.poses = Some(poses);
        Ok(self)
    }

    pub fn with_intrinsics(mut self, intrinsics: Vec<Intrinsics>) -> Result<Self> {
        let expected = self
            .poses
            .as_ref()
            .map(Vec::len)
            .or(self.depths.as_ref().map(Vec::len))
            .or(self.intrinsics.as_ref().map(Vec::len));
        if let Some(n) = expected.filter(|&n| n != intrinsics.len()) {
            return Err(Error::Shape(format!(
                "intrinsics prior covers {} views, scene has {n}",
                intrinsics.len()
            )));
        }
        self.intrinsics = Some(intrinsics);
        Ok(self)
    }

    pub fn without_depths(mut self) -> Self {
        self.depths = None;
        self
    }
}

/// Express poses in the frame of the first one: `T_i <- T_0⁻¹ T_i`.
pub fn anchor_to_first(poses: &[Pose]) -> Vec<Pose> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let inv = first.inverse();
    poses.iter().map(|p| inv.compose(p)).collect()
}

/// Geodesic angle between two rotations, `arccos((tr(RᵀR̂) - 1) / 2)`.
pub fn g_rot<'t>(rotation: Var<'t>, prior: Var<'t>) -> Result<Var<'t>> {
    let c = rotation
        .transpose()?
        .matmul(prior)?
        .trace()?
        .add_scalar(-1.0)
        .scale(0.5)
        .clamp(-1.0, 1.0);
    Ok(c.arccos()?)
}

/// Mean distance of camera centers (translations, for camera-to-world poses)
/// from the origin, floored at [`SCALE_EPS`].
pub fn scene_scale<'t>(translations: &[Var<'t>]) -> Result<Var<'t>> {
    let first = translations.first().ok_or(Error::TooFewViews { required: 1, got: 0 })?;
    let mut total = first.norm()?;
    for t in &translations[1..] {
        total = total.add(t.norm()?)?;
    }
    Ok(total
        .scale(1.0 / translations.len() as f64)
        .clamp(SCALE_EPS, f64::INFINITY))
}

/// `‖t / s - t̂ / ŝ‖₁`.
pub fn g_trans<'t>(t: Var<'t>, prior: Var<'t>, s: Var<'t>, prior_s: Var<'t>) -> Result<Var<'t>> {
    Ok(t.div(s)?.sub(prior.div(prior_s)?)?.abs().sum())
}

/// `|fx - f̂x| + |fy - f̂y|` for focal `[2]`.
pub fn g_k<'t>(focal: Var<'t>, prior: &Intrinsics) -> Result<Var<'t>> {
    let p = focal.tape().constant(prior.focal_tensor());
    Ok(focal.sub(p)?.abs().sum())
}

/// Least-squares scale and shift mapping predicted depths onto prior depths,
/// fitted jointly over the valid pixels of every view.
pub fn global_depth_align<'t>(depths: &[Var<'t>], priors: &[DepthMap]) -> Result<(Var<'t>, Var<'t>)> {
    if depths.len() != priors.len() || depths.is_empty() {
        return Err(Error::Shape(format!(
            "{} predicted depth maps for {} priors",
            depths.len(),
            priors.len()
        )));
    }
    let tape = depths[0].tape();
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for (d, p) in depths.iter().zip(priors) {
        if d.shape() != p.values().shape() {
            return Err(Error::Shape(format!(
                "depth {:?} vs prior {:?}",
                d.shape(),
                p.values().shape()
            )));
        }
        let idx = valid_indices(p.mask());
        pred.push(d.reshape(&[d.value().numel()])?.gather(&idx)?);
        target.extend(idx.iter().map(|&i| p.values().data()[i]));
    }
    let d = concat(&pred, 0)?;
    let n = target.len();
    if n < 2 {
        return Err(Error::DegenerateAlignment);
    }
    let dh = tape.constant(Tensor::vector(target));
    let dc = d.sub(d.mean()?)?;
    let hc = dh.sub(dh.mean()?)?;
    let var = dc.square().sum();
    let mean_sq = var.item()? / n as f64;
    let d_mean = d.value().sum() / n as f64;
    if !(mean_sq > 1e-20 * (1.0 + d_mean * d_mean)) {
        return Err(Error::DegenerateAlignment);
    }
    let s = dc.mul(hc)?.sum().div(var)?;
    let t = dh.mean()?.sub(s.mul(d.mean()?)?)?;
    Ok((s, t))
}

/// Mean over valid pixels of `|s D + t - D̂|`; zero (with a warning) if none are valid.
pub fn g_depth<'t>(depth: Var<'t>, prior: &DepthMap, s: Var<'t>, t: Var<'t>) -> Result<Var<'t>> {
    let tape = depth.tape();
    if depth.shape() != prior.values().shape() {
        return Err(Error::Shape(format!(
            "depth {:?} vs prior {:?}",
            depth.shape(),
            prior.values().shape()
        )));
    }
    let idx = valid_indices(prior.mask());
    if idx.is_empty() {
        warn!("depth prior has no valid pixels; g_depth is zero");
        return Ok(tape.scalar(0.0));
    }
    let d = depth.reshape(&[depth.value().numel()])?.gather(&idx)?;
    let target = tape.constant(Tensor::vector(idx.iter().map(|&i| prior.values().data()[i]).collect()));
    Ok(d.mul(s)?.add(t)?.sub(target)?.abs().mean()?)
}

fn valid_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Value-level geodesic angle between two rotations, in radians.
pub fn rotation_angle(a: &Pose, b: &Pose) -> f64 {
    let c = ((a.rotation().transpose() * b.rotation()).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}
