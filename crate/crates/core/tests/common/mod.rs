#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tco_autodiff::Tensor;
use tco_core::geometry::{Intrinsics, Pose};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-max_angle..max_angle);
    *Pose::from_axis_angle(axis, angle, Vector3::zeros()).rotation()
}

pub fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_t: f64) -> Pose {
    let t = Vector3::new(
        rng.random_range(-max_t..max_t),
        rng.random_range(-max_t..max_t),
        rng.random_range(-max_t..max_t),
    );
    Pose::new(random_rotation(rng, max_angle), t).unwrap()
}

/// Smooth procedural color at a point on the plane.
pub fn texture(u: f64, v: f64) -> [f64; 3] {
    [
        0.5 + 0.35 * (1.7 * u + 0.4 * v).sin(),
        0.5 + 0.35 * (1.3 * v - 0.8 * u).cos(),
        0.5 + 0.3 * (0.9 * u + 1.1 * v + 0.5).sin(),
    ]
}

pub struct Plane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
}

impl Plane {
    pub fn new(point: Vector3<f64>, normal: Vector3<f64>) -> Self {
        let normal = normal.normalize();
        let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let axis_u = normal.cross(&helper).normalize();
        let axis_v = normal.cross(&axis_u);
        Self { point, normal, axis_u, axis_v }
    }

    pub fn fronto(depth: f64) -> Self {
        Self::new(Vector3::new(0.0, 0.0, depth), Vector3::z())
    }
}

/// Exact image and depth of a textured plane seen by a camera-to-world pose.
pub fn render_plane(plane: &Plane, pose: &Pose, k: &Intrinsics, scale: f64) -> (Tensor, Tensor) {
    let (w, h) = (k.width, k.height);
    let mut img = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = Vector3::new(
                (x as f64 + 0.5 - k.cx()) / k.fx,
                (y as f64 + 0.5 - k.cy()) / k.fy,
                1.0,
            );
            let dir = pose.rotation() * d;
            let o = pose.center();
            let tau = (plane.point - o).dot(&plane.normal) / dir.dot(&plane.normal);
            assert!(tau > 0.0, "plane behind camera");
            let p = o + dir * tau;
            let rel = p - plane.point;
            img.extend(texture(rel.dot(&plane.axis_u) * scale, rel.dot(&plane.axis_v) * scale));
            depth.push(tau);
        }
    }
    (
        Tensor::new(vec![h, w, 3], img).unwrap(),
        Tensor::new(vec![h, w], depth).unwrap(),
    )
}

/// Camera-to-world poses on a horizontal arc around `target`, all looking at it.
pub fn arc_poses(n: usize, radius: f64, spread_deg: f64, target: Vector3<f64>) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let a = if n == 1 {
                0.0
            } else {
                (i as f64 / (n - 1) as f64 - 0.5) * spread_deg.to_radians()
            };
            let center = target + Vector3::new(radius * a.sin(), 0.0, -radius * a.cos());
            look_at(center, target)
        })
        .collect()
}

pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let z = (target - center).normalize();
    let x = Vector3::new(0.0, 1.0, 0.0).cross(&z).normalize();
    let y = z.cross(&x);
    Pose::new(Matrix3::from_columns(&[x, y, z]), center).unwrap()
}

pub fn intrinsics(size: usize) -> Intrinsics {
    Intrinsics::new(size as f64, size as f64, size, size).unwrap()
}
