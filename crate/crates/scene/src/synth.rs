//! Procedural scenes with exact depth, poses and intrinsics.
//!
//! Geometry is a handful of textured planar pieces ray-cast analytically from
//! cameras on a horizontal arc. Images are quantized to 8 bits and depths to
//! `f32` so a scene survives a round trip through a scene directory unchanged.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tco_autodiff::Tensor;
use tco_core::geometry::{DepthMap, Intrinsics, Pose};
use tco_core::model::SceneSample;
use tco_core::priors::{anchor_to_first, PriorSet};

use crate::error::{Result, SceneError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Plane,
    Box,
    TwoWalls,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Plane, Layout::Box, Layout::TwoWalls];
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Plane => "plane",
            Layout::Box => "box",
            Layout::TwoWalls => "two-walls",
        })
    }
}

impl FromStr for Layout {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Layout::Plane),
            "box" => Ok(Layout::Box),
            "two-walls" | "two_walls" => Ok(Layout::TwoWalls),
            _ => Err(SceneError::Spec(format!("unknown layout {s:?} (plane, box, two-walls)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layout: Layout,
    /// Seeds geometry jitter, camera placement and texture.
    pub texture_seed: u64,
    pub n_views: usize,
    pub resolution: usize,
    /// Angle (degrees) spanned by the camera arc.
    pub baseline: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Plane,
            texture_seed: 0,
            n_views: 6,
            resolution: 32,
            baseline: 40.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub depths: Vec<DepthMap>,
    pub poses: Vec<Pose>,
    pub intrinsics: Vec<Intrinsics>,
}

/// Images plus optional priors and ground truth. Poses are camera-to-world.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub images: Vec<Tensor>,
    pub depths: Option<Vec<DepthMap>>,
    pub poses: Option<Vec<Pose>>,
    pub intrinsics: Option<Vec<Intrinsics>>,
    pub gt: Option<GroundTruth>,
}

impl Scene {
    pub fn n_views(&self) -> usize {
        self.images.len()
    }

    /// Priors restricted to the requested kinds.
    pub fn priors(&self, pose: bool, intrinsics: bool, depth: bool) -> Result<PriorSet> {
        Ok(PriorSet::new(
            self.n_views(),
            self.poses.clone().filter(|_| pose),
            self.intrinsics.clone().filter(|_| intrinsics),
            self.depths.clone().filter(|_| depth),
        )?)
    }

    /// Supervision for pretraining, with poses relative to the first view.
    pub fn to_sample(&self) -> Result<SceneSample> {
        let gt = self
            .gt
            .as_ref()
            .ok_or_else(|| SceneError::Spec("scene has no ground truth".into()))?;
        Ok(SceneSample {
            images: self.images.clone(),
            depths: gt.depths.iter().map(|d| d.values().clone()).collect(),
            poses: anchor_to_first(&gt.poses),
            intrinsics: gt.intrinsics.clone(),
        })
    }
}

#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    /// Per channel: (frequency u, frequency v, phase, amplitude).
    waves: [[(f64, f64, f64, f64); 3]; 3],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
        for ch in waves.iter_mut() {
            for (k, w) in ch.iter_mut().enumerate() {
                let freq = rng.random_range(1.2..1.6) * (1.0 + 0.5 * k as f64);
                let dir = rng.random_range(0.0..2.0 * PI);
                *w = (
                    freq * dir.cos(),
                    freq * dir.sin(),
                    rng.random_range(0.0..2.0 * PI),
                    0.22 / (1.0 + k as f64),
                );
            }
        }
        let base = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
        Self { base, waves }
    }

    fn color(&self, a: f64, b: f64) -> [f64; 3] {
        let mut c = self.base;
        for (ch, waves) in c.iter_mut().zip(&self.waves) {
            for &(fu, fv, ph, amp) in waves {
                *ch += amp * (fu * a + fv * b + ph).sin();
            }
            *ch = ch.clamp(0.0, 1.0);
        }
        c
    }
}

#[derive(Clone, Debug)]
struct Surface {
    origin: Vector3<f64>,
    normal: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    a_range: (f64, f64),
    b_range: (f64, f64),
    texture: usize,
}

impl Surface {
    fn new(origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, a_range: (f64, f64), b_range: (f64, f64), texture: usize) -> Self {
        let u = u.normalize();
        let v = (v - u * u.dot(&v)).normalize();
        Self { origin, normal: u.cross(&v), u, v, a_range, b_range, texture }
    }

    fn intersect(&self, o: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let den = dir.dot(&self.normal);
        if den.abs() < 1e-12 {
            return None;
        }
        let tau = (self.origin - o).dot(&self.normal) / den;
        if tau <= 1e-6 {
            return None;
        }
        let rel = o + dir * tau - self.origin;
        let (a, b) = (rel.dot(&self.u), rel.dot(&self.v));
        let inside = |x: f64, r: (f64, f64)| x >= r.0 && x <= r.1;
        (inside(a, self.a_range) && inside(b, self.b_range)).then_some((tau, a, b))
    }
}

const INF: (f64, f64) = (f64::NEG_INFINITY, f64::INFINITY);

fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rotation_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Surfaces of a layout around the origin. Cameras look along +z from z < 0.
fn build_layout(layout: Layout, rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    match layout {
        Layout::Plane => {
            let r = rotation_y(rng.random_range(-0.45..0.45)) * rotation_x(rng.random_range(-0.35..0.35));
            vec![Surface::new(Vector3::zeros(), r * x, r * y, INF, INF, 0)]
        }
        Layout::TwoWalls => {
            let beta: f64 = rng.random_range(0.35..0.7);
            // concave corners recede from the cameras, convex ones point at them
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let edge = Vector3::new(rng.random_range(-0.4..0.4), 0.0, 0.0);
            let da = Vector3::new(-beta.cos(), 0.0, -s * beta.sin());
            let db = Vector3::new(beta.cos(), 0.0, -s * beta.sin());
            vec![
                Surface::new(edge, da, y, (0.0, f64::INFINITY), INF, 0),
                Surface::new(edge, db, y, (0.0, f64::INFINITY), INF, 1),
                Surface::new(Vector3::new(0.0, 0.0, 2.5), x, y, INF, INF, 2),
            ]
        }
        Layout::Box => {
            let r = rotation_y(rng.random_range(0.5..1.1)) * rotation_x(rng.random_range(-0.3..0.3));
            let h = rng.random_range(0.6..0.9);
            let c = Vector3::new(rng.random_range(-0.2..0.2), 0.0, 0.0);
            let mut s = vec![Surface::new(Vector3::new(0.0, 0.0, 2.0 + h), x, y, INF, INF, 0)];
            let axes = [r * x, r * y, r * z];
            for (i, n) in axes.iter().enumerate() {
                let (u, v) = (axes[(i + 1) % 3], axes[(i + 2) % 3]);
                for sign in [-1.0, 1.0] {
                    s.push(Surface::new(c + n * (sign * h), u, v, (-h, h), (-h, h), 1 + i));
                }
            }
            s
        }
    }
}

pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Result<Pose> {
    let z = (target - center).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    Ok(Pose::new(Matrix3::from_columns(&[x, y, z]), center)?)
}

/// Render a scene from `spec`. Identical specs give bitwise-identical scenes.
pub fn synth_scene(spec: &SynthSpec) -> Result<Scene> {
    if spec.n_views < 2 {
        return Err(SceneError::Spec(format!("need at least 2 views, got {}", spec.n_views)));
    }
    if spec.resolution < 2 {
        return Err(SceneError::Spec(format!("resolution {} is too small", spec.resolution)));
    }
    if !(spec.baseline >= 0.0 && spec.baseline < 180.0) {
        return Err(SceneError::Spec(format!("baseline {} must lie in [0, 180)", spec.baseline)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let surfaces = build_layout(spec.layout, &mut rng);
    let textures: Vec<Texture> = (0..7).map(|_| Texture::random(&mut rng)).collect();
    let radius = rng.random_range(3.6..4.4);
    let res = spec.resolution;
    let f = res as f64 * rng.random_range(0.9..1.1);
    let k = Intrinsics::new(f, f, res, res)?;
    let offset = rng.random_range(-0.1..0.1);

    let mut poses = Vec::with_capacity(spec.n_views);
    for i in 0..spec.n_views {
        let frac = i as f64 / (spec.n_views - 1) as f64 - 0.5;
        let a = (frac * spec.baseline).to_radians() + offset + rng.random_range(-0.03..0.03);
        let elev = rng.random_range(-0.3..0.3);
        let center = Vector3::new(radius * a.sin(), elev, -radius * a.cos());
        let target = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
        poses.push(look_at(center, target)?);
    }

    let mut images = Vec::with_capacity(spec.n_views);
    let mut depths = Vec::with_capacity(spec.n_views);
    for (view, pose) in poses.iter().enumerate() {
        let mut img = Vec::with_capacity(res * res * 3);
        let mut depth = Vec::with_capacity(res * res);
        let mut mask = Vec::with_capacity(res * res);
        for py in 0..res {
            for px in 0..res {
                let d = Vector3::new((px as f64 + 0.5 - k.cx()) / k.fx, (py as f64 + 0.5 - k.cy()) / k.fy, 1.0);
                let dir = pose.rotation() * d;
                let hit = surfaces
                    .iter()
                    .filter_map(|s| s.intersect(&pose.center(), &dir).map(|h| (h, s)))
                    .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0));
                match hit {
                    Some(((tau, a, b), surface)) => {
                        let shade = shading(&(pose.center() + dir * tau), &surface.normal);
                        let albedo = textures[surface.texture].color(a, b);
                        img.extend(albedo.map(|c| quantize_u8(c * shade)));
                        depth.push(tau as f32 as f64);
                        mask.push(true);
                    }
                    None => {
                        img.extend([0.0; 3]);
                        depth.push(0.0);
                        mask.push(false);
                    }
                }
            }
        }
        check_coverage(view, &mask)?;
        images.push(Tensor::new(vec![res, res, 3], img)?);
        depths.push(DepthMap::new(Tensor::new(vec![res, res], depth)?, mask)?);
    }
    let intrinsics = vec![k; spec.n_views];
    let gt = GroundTruth { depths: depths.clone(), poses: poses.clone(), intrinsics: intrinsics.clone() };
    Ok(Scene {
        images,
        depths: Some(depths),
        poses: Some(poses),
        intrinsics: Some(intrinsics),
        gt: Some(gt),
    })
}

/// Minimum fraction of pixels that must see geometry.
pub const MIN_COVERAGE: f64 = 0.5;

pub fn check_coverage(view: usize, mask: &[bool]) -> Result<()> {
    let coverage = mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
    if coverage < MIN_COVERAGE {
        return Err(SceneError::NoCoverage { view, coverage: coverage * 100.0 });
    }
    Ok(())
}

/// Two-sided Lambertian term of a point light behind the camera arc, with
/// inverse-square falloff normalized to 1 at the origin. It does not depend
/// on the viewer, so a surface point looks the same from every camera.
fn shading(p: &Vector3<f64>, normal: &Vector3<f64>) -> f64 {
    let light = Vector3::new(0.0, -1.5, -7.0);
    let to_light = light - p;
    let r2 = to_light.norm_squared();
    let lambert = normal.dot(&to_light).abs() / r2.sqrt();
    (0.35 + 0.65 * lambert) * light.norm_squared() / r2
}

fn quantize_u8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
