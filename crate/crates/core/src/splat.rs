//! Per-pixel 2D Gaussian splats derived from depth, confidence and camera.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use tco_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{
    nondegenerate_pixels, pointmap_gradients_var, stack_last, surface_normals_var, to_world_var,
    unproject_var, Intrinsics, Pose, NORMAL_EPS,
};

pub const DEFAULT_RADIUS_SCALE: f64 = 0.5;
/// Orthonormality tolerance for quaternion frames.
pub const FRAME_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    pub center: Vector3<f64>,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Scalar-first unit quaternion of the frame (tangent u, tangent v, normal).
    pub quaternion: [f64; 4],
    pub radii: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatSet {
    pub splats: Vec<Splat>,
    pub provenance: Vec<Provenance>,
}

impl SplatSet {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

/// Splats on a tape. Rows of every field correspond to `provenance`.
#[derive(Clone, Debug)]
pub struct DiffSplats<'t> {
    pub centers: Var<'t>,
    /// World-frame tangent axes, `[M, 3]` each.
    pub tangent_u: Var<'t>,
    pub tangent_v: Var<'t>,
    /// Standard deviations along the tangent axes, `[M, 2]`.
    pub radii: Var<'t>,
    pub opacity: Var<'t>,
    pub colors: Var<'t>,
    pub provenance: Vec<Provenance>,
}

/// Camera parameters of one view on a tape: rotation `[3, 3]`,
/// translation `[3]`, focal `[2]`.
#[derive(Clone, Copy, Debug)]
pub struct CameraVars<'t> {
    pub rotation: Var<'t>,
    pub translation: Var<'t>,
    pub focal: Var<'t>,
    pub width: usize,
    pub height: usize,
}

impl<'t> CameraVars<'t> {
    pub fn constant(tape: &'t Tape, pose: &Pose, k: &Intrinsics) -> Self {
        Self {
            rotation: tape.constant(pose.rotation_tensor()),
            translation: tape.constant(pose.translation_tensor()),
            focal: tape.constant(k.focal_tensor()),
            width: k.width,
            height: k.height,
        }
    }
}

/// Inputs for one source view.
#[derive(Clone, Copy, Debug)]
pub struct SourceView<'a, 't> {
    pub view: usize,
    /// RGB `[H, W, 3]`.
    pub image: &'a Tensor,
    pub depth: Var<'t>,
    pub confidence: Var<'t>,
    pub camera: CameraVars<'t>,
    /// Optional validity mask over pixels, row-major.
    pub mask: Option<&'a [bool]>,
}

/// Build one splat per valid, non-degenerate source pixel.
pub fn derive_splats<'t>(src: &SourceView<'_, 't>, radius_scale: f64) -> Result<DiffSplats<'t>> {
    let cam = src.camera;
    let (h, w) = (cam.height, cam.width);
    if src.depth.shape() != [h, w] || src.confidence.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "depth {:?} / confidence {:?} do not match {h}x{w}",
            src.depth.shape(),
            src.confidence.shape()
        )));
    }
    if src.image.shape() != [h, w, 3] {
        return Err(Error::Shape(format!("image must be [{h}, {w}, 3], got {:?}", src.image.shape())));
    }
    if radius_scale < 0.0 || !radius_scale.is_finite() {
        return Err(Error::Config(format!("radius scale must be nonnegative, got {radius_scale}")));
    }
    let valid = |i: usize| src.mask.map_or(true, |m| m[i]);
    let conf = src.confidence.value();
    for (i, &c) in conf.data().iter().enumerate() {
        if valid(i) && (c.is_nan() || c <= 1.0) {
            return Err(Error::ConfidenceContract { x: i % w, y: i / w, value: c });
        }
    }

    let tape = src.depth.tape();
    let points = unproject_var(src.depth, cam.focal)?;
    let (gx, gy) = pointmap_gradients_var(points)?;
    let pixels: Vec<usize> = nondegenerate_pixels(&gx.value(), &gy.value(), NORMAL_EPS)
        .into_iter()
        .filter(|&i| valid(i))
        .collect();
    let n = h * w;
    let normals = surface_normals_var(gx, gy, &pixels)?.normals;
    let gx = gx.reshape(&[n, 3])?.gather(&pixels)?;
    let gy = gy.reshape(&[n, 3])?.gather(&pixels)?;

    let nz = normals.slice(1, 2, 3)?.abs();
    let radii = concat_cols(gx.norm()?, gy.norm()?)?.mul(nz)?.scale(radius_scale);
    let e1 = gx.normalize()?;
    let e2 = normals.cross(e1)?.normalize()?;

    let centers = points.reshape(&[n, 3])?.gather(&pixels)?;
    let centers = to_world_var(centers, cam.rotation, cam.translation)?;
    let rt = cam.rotation.transpose()?;
    let tangent_u = e1.matmul(rt)?;
    let tangent_v = e2.matmul(rt)?;

    let c = src.confidence.reshape(&[n])?.gather(&pixels)?;
    let opacity = c.add_scalar(-1.0).div(c)?;

    let img = src.image.data();
    let colors: Vec<f64> = pixels.iter().flat_map(|&i| img[i * 3..i * 3 + 3].iter().copied()).collect();
    let colors = tape.constant(Tensor::new(vec![pixels.len(), 3], colors)?);

    let provenance = pixels
        .iter()
        .map(|&i| Provenance { view: src.view, x: i % w, y: i / w })
        .collect();
    Ok(DiffSplats { centers, tangent_u, tangent_v, radii, opacity, colors, provenance })
}

fn concat_cols<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    stack_last(&[a, b])
}

impl DiffSplats<'_> {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Value-level copy with quaternions built from the tangent frames.
    pub fn to_splat_set(&self) -> Result<SplatSet> {
        let (c, u, v, r, o, col) = (
            self.centers.value(),
            self.tangent_u.value(),
            self.tangent_v.value(),
            self.radii.value(),
            self.opacity.value(),
            self.colors.value(),
        );
        let mut splats = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            let e1 = row3(u.data(), k);
            let e2 = row3(v.data(), k);
            let n = e1.cross(&e2);
            // re-orthogonalize against the normal before building the quaternion
            let e1 = (e1 - n * n.dot(&e1)).normalize();
            let e2 = n.cross(&e1);
            splats.push(Splat {
                center: row3(c.data(), k),
                color: [col.data()[k * 3], col.data()[k * 3 + 1], col.data()[k * 3 + 2]],
                opacity: o.data()[k],
                quaternion: frame_to_quaternion(&e1, &e2, &n)?,
                radii: [r.data()[k * 2], r.data()[k * 2 + 1]],
            });
        }
        Ok(SplatSet { splats, provenance: self.provenance.clone() })
    }
}

fn row3(data: &[f64], k: usize) -> Vector3<f64> {
    Vector3::new(data[k * 3], data[k * 3 + 1], data[k * 3 + 2])
}

/// Quaternion `(w, x, y, z)` whose rotation matrix has columns `(e1, e2, e3)`,
/// with `w >= 0`.
pub fn frame_to_quaternion(e1: &Vector3<f64>, e2: &Vector3<f64>, e3: &Vector3<f64>) -> Result<[f64; 4]> {
    let m = Matrix3::from_columns(&[*e1, *e2, *e3]);
    let dev = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !dev.is_finite() || dev > FRAME_TOL || (det - 1.0).abs() > FRAME_TOL {
        return Err(Error::NonOrthonormalFrame(dev.max((det - 1.0).abs())));
    }
    let q = matrix_to_quaternion(&m);
    Ok(canonical(q))
}

fn canonical(q: Quaternion<f64>) -> [f64; 4] {
    let q = q.normalize();
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

// Shepperd's method: branch on the largest diagonal term for stability.
fn matrix_to_quaternion(m: &Matrix3<f64>) -> Quaternion<f64> {
    let tr = m.trace();
    if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
        let s = (1.0 + tr).sqrt() * 2.0;
        Quaternion::new(0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s)
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new((m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s)
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new((m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s)
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quaternion::new((m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s)
    }
}

/// Rotation matrix of a scalar-first quaternion.
pub fn quaternion_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    *uq.to_rotation_matrix().matrix()
}

/// Derive value-level splats for one view without keeping a tape around.
pub fn derive_splat_set(
    view: usize,
    image: &Tensor,
    depth: &Tensor,
    confidence: &Tensor,
    pose: &Pose,
    k: &Intrinsics,
    radius_scale: f64,
    mask: Option<&[bool]>,
) -> Result<SplatSet> {
    let tape = Tape::new();
    let src = SourceView {
        view,
        image,
        depth: tape.constant(depth.clone()),
        confidence: tape.constant(confidence.clone()),
        camera: CameraVars::constant(&tape, pose, k),
        mask,
    };
    derive_splats(&src, radius_scale)?.to_splat_set()
}
