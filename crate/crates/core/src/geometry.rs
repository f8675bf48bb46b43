//! Cameras, depth maps and point maps.
//!
//! Poses are camera-to-world throughout: a camera-frame point `p` lands at
//! `R p + t` in the world, so the camera center is `t`. Pixel `(x, y)` has its
//! center at `(x + 0.5, y + 0.5)` and the principal point sits at the image
//! center `(W / 2, H / 2)`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use tco_autodiff::{concat, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;
/// Cross-product norm below which a normal is treated as degenerate.
pub const NORMAL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !dev.is_finite() || dev > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("RᵀR deviates from I by {dev:e}")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Project an arbitrary matrix to the nearest rotation (polar decomposition).
    pub fn from_nearest_rotation(m: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(Error::InvalidPose("SVD failed".into())),
        };
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self::new(u * d * vt, translation)
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = match Unit::try_new(axis, 1e-15) {
            Some(a) => *Rotation3::from_axis_angle(&a, angle).matrix(),
            None => Matrix3::identity(),
        };
        Self { rotation, translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_tensor(&self) -> Tensor {
        let r = &self.rotation;
        let data = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect();
        Tensor::new(vec![3, 3], data).expect("3x3")
    }

    pub fn translation_tensor(&self) -> Tensor {
        Tensor::vector(self.translation.iter().copied().collect())
    }

    /// Read a pose back from rotation `[3, 3]` and translation `[3]` tensors.
    pub fn from_tensors(rotation: &Tensor, translation: &Tensor) -> Result<Self> {
        if rotation.shape() != [3, 3] || translation.shape() != [3] {
            return Err(Error::Shape(format!(
                "pose tensors must be [3, 3] and [3], got {:?} and {:?}",
                rotation.shape(),
                translation.shape()
            )));
        }
        let r = Matrix3::from_row_slice(rotation.data());
        let t = Vector3::from_column_slice(translation.data());
        Self::new(r, t)
    }

    /// Row-major `[R | t]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for j in 0..3 {
                row[j] = self.rotation[(i, j)];
            }
            row[3] = self.translation[i];
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 3]) -> Result<Self> {
        let r = Matrix3::from_fn(|i, j| rows[i][j]);
        let t = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Self::new(r, t)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "empty image extent {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            width,
            height,
        })
    }

    pub fn cx(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height as f64 / 2.0
    }

    pub fn focal_tensor(&self) -> Tensor {
        Tensor::vector(vec![self.fx, self.fy])
    }

    pub fn with_focal(&self, fx: f64, fy: f64) -> Result<Self> {
        Self::new(fx, fy, self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Tensor,
    mask: Vec<bool>,
}

impl DepthMap {
    /// Depths `[H, W]` with a validity mask; valid entries must be positive.
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        let (h, w) = hw(values.shape())?;
        if mask.len() != h * w {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {h}x{w} depth map",
                mask.len()
            )));
        }
        check_positive(values.data(), Some(&mask), w)?;
        Ok(Self { values, mask })
    }

    pub fn dense(values: Tensor) -> Result<Self> {
        let n = values.numel();
        Self::new(values, vec![true; n])
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    values: Tensor,
}

impl ConfidenceMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (_, w) = hw(values.shape())?;
        if let Some(i) = values.data().iter().position(|&c| c.is_nan() || c <= 1.0) {
            return Err(Error::ConfidenceContract {
                x: i % w,
                y: i / w,
                value: values.data()[i],
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    Camera,
    World,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub points: Tensor,
    pub mask: Vec<bool>,
    pub frame: Frame,
}

impl PointMap {
    pub fn height(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn point(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = (y * self.width() + x) * 3;
        let d = self.points.data();
        Vector3::new(d[i], d[i + 1], d[i + 2])
    }

    /// Valid points in row-major pixel order.
    pub fn valid_points(&self) -> Vec<Vector3<f64>> {
        self.points
            .data()
            .chunks(3)
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| Vector3::new(p[0], p[1], p[2]))
            .collect()
    }
}

/// Unit normals `[H, W, 3]`; masked pixels hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub normals: Tensor,
    pub mask: Vec<bool>,
}

/// Normals of the non-degenerate pixels only, in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct NormalsVar<'t> {
    pub normals: Var<'t>,
}

fn hw(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        _ => Err(Error::Shape(format!("expected [H, W], got {shape:?}"))),
    }
}

fn check_positive(values: &[f64], mask: Option<&[bool]>, width: usize) -> Result<()> {
    for (i, &d) in values.iter().enumerate() {
        let valid = mask.map_or(true, |m| m[i]);
        if valid && (d.is_nan() || d <= 0.0) {
            return Err(Error::NonPositiveDepth {
                x: i % width,
                y: i / width,
                value: d,
            });
        }
    }
    Ok(())
}

/// Pixel-center offsets from the principal point, `(x + 0.5 - cx, y + 0.5 - cy)`.
pub fn pixel_offsets(width: usize, height: usize) -> (Tensor, Tensor) {
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let mut ox = Vec::with_capacity(width * height);
    let mut oy = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            ox.push(x as f64 + 0.5 - cx);
            oy.push(y as f64 + 0.5 - cy);
        }
    }
    (
        Tensor::new(vec![height, width], ox).expect("grid"),
        Tensor::new(vec![height, width], oy).expect("grid"),
    )
}

/// Stack same-shaped tensors along a new trailing axis.
pub fn stack_last<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let expanded = parts
        .iter()
        .map(|p| {
            let mut s = p.shape();
            s.push(1);
            p.reshape(&s)
        })
        .collect::<tco_autodiff::Result<Vec<_>>>()?;
    let axis = expanded[0].shape().len() - 1;
    Ok(concat(&expanded, axis)?)
}

/// Differentiable unprojection of depth `[H, W]` with focal `[fx, fy]` into
/// camera-frame points `[H, W, 3]`. Every entry of `depth` must be positive.
pub fn unproject_var<'t>(depth: Var<'t>, focal: Var<'t>) -> Result<Var<'t>> {
    let (h, w) = hw(&depth.shape())?;
    if focal.shape() != [2] {
        return Err(Error::Shape(format!("focal must be [2], got {:?}", focal.shape())));
    }
    check_positive(depth.value().data(), None, w)?;
    let tape = depth.tape();
    let (ox, oy) = pixel_offsets(w, h);
    let fx = focal.slice(0, 0, 1)?;
    let fy = focal.slice(0, 1, 2)?;
    let x = depth.mul(tape.constant(ox))?.div(fx)?;
    let y = depth.mul(tape.constant(oy))?.div(fy)?;
    stack_last(&[x, y, depth])
}

/// Map points `[..., 3]` by `R p + t`.
pub fn to_world_var<'t>(points: Var<'t>, rotation: Var<'t>, translation: Var<'t>) -> Result<Var<'t>> {
    let shape = points.shape();
    if shape.last() != Some(&3) {
        return Err(Error::Shape(format!("points must end in 3, got {shape:?}")));
    }
    let n = shape.iter().product::<usize>() / 3;
    let flat = points.reshape(&[n, 3])?;
    let moved = flat.matmul(rotation.transpose()?)?.add(translation)?;
    Ok(moved.reshape(&shape)?)
}

/// Forward differences along x (width) and y (height); the last column and row
/// repeat the previous difference.
pub fn pointmap_gradients_var<'t>(points: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = points.shape();
    let (h, w) = match shape.as_slice() {
        [h, w, 3] => (*h, *w),
        _ => return Err(Error::Shape(format!("expected [H, W, 3], got {shape:?}"))),
    };
    if h < 2 || w < 2 {
        return Err(Error::DegenerateExtent { height: h, width: w });
    }
    let dx = points.slice(1, 1, w)?.sub(points.slice(1, 0, w - 1)?)?;
    let gx = concat(&[dx, dx.slice(1, w - 2, w - 1)?], 1)?;
    let dy = points.slice(0, 1, h)?.sub(points.slice(0, 0, h - 1)?)?;
    let gy = concat(&[dy, dy.slice(0, h - 2, h - 1)?], 0)?;
    Ok((gx, gy))
}

/// Flat pixel indices whose gradient cross product is non-degenerate.
pub fn nondegenerate_pixels(gx: &Tensor, gy: &Tensor, eps: f64) -> Vec<usize> {
    gx.data()
        .chunks(3)
        .zip(gy.data().chunks(3))
        .enumerate()
        .filter(|(_, (a, b))| {
            let c = Vector3::new(a[0], a[1], a[2]).cross(&Vector3::new(b[0], b[1], b[2]));
            c.norm() > eps
        })
        .map(|(i, _)| i)
        .collect()
}

/// Unit normals at the given flat pixel indices, shape `[M, 3]`.
pub fn surface_normals_var<'t>(gx: Var<'t>, gy: Var<'t>, pixels: &[usize]) -> Result<NormalsVar<'t>> {
    let n = gx.value().numel() / 3;
    let cross = gx.cross(gy)?.reshape(&[n, 3])?;
    let normals = cross.gather(pixels)?.normalize()?;
    Ok(NormalsVar { normals })
}

pub fn unproject(depth: &DepthMap, k: &Intrinsics) -> Result<PointMap> {
    let (h, w) = (depth.height(), depth.width());
    if (w, h) != (k.width, k.height) {
        return Err(Error::Shape(format!(
            "depth is {w}x{h} but intrinsics describe {}x{}",
            k.width, k.height
        )));
    }
    if depth.valid_count() == 0 {
        return Err(Error::Shape("depth map has no valid pixels".into()));
    }
    let (ox, oy) = pixel_offsets(w, h);
    let mut points = Vec::with_capacity(h * w * 3);
    for ((&d, &x), &y) in depth.values().data().iter().zip(ox.data()).zip(oy.data()) {
        points.extend_from_slice(&[x / k.fx * d, y / k.fy * d, d]);
    }
    Ok(PointMap {
        points: Tensor::new(vec![h, w, 3], points)?,
        mask: depth.mask().to_vec(),
        frame: Frame::Camera,
    })
}

/// Continuous image coordinates of a camera-frame point; pixel `(x, y)` has
/// its center at `(x + 0.5, y + 0.5)`. `None` behind the camera.
pub fn project(p: &Vector3<f64>, k: &Intrinsics) -> Option<(f64, f64)> {
    (p.z > 0.0).then(|| (k.fx * p.x / p.z + k.cx(), k.fy * p.y / p.z + k.cy()))
}

pub fn to_world(pm: &PointMap, pose: &Pose) -> Result<PointMap> {
    if pm.frame != Frame::Camera {
        return Err(Error::Shape("to_world expects a camera-frame point map".into()));
    }
    let mut out = Vec::with_capacity(pm.points.numel());
    for p in pm.points.data().chunks(3) {
        let q = pose.transform_point(&Vector3::new(p[0], p[1], p[2]));
        out.extend_from_slice(q.as_slice());
    }
    Ok(PointMap {
        points: Tensor::new(pm.points.shape().to_vec(), out)?,
        mask: pm.mask.clone(),
        frame: Frame::World,
    })
}

pub fn pointmap_gradients(pm: &PointMap) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (gx, gy) = pointmap_gradients_var(tape.constant(pm.points.clone()))?;
    let (gx, gy) = (gx.value(), gy.value());
    Ok(((*gx).clone(), (*gy).clone()))
}

pub fn surface_normals(gx: &Tensor, gy: &Tensor) -> Result<NormalMap> {
    if gx.shape() != gy.shape() || gx.shape().last() != Some(&3) {
        return Err(Error::Shape(format!(
            "gradient shapes {:?} and {:?} differ or do not end in 3",
            gx.shape(),
            gy.shape()
        )));
    }
    let n = gx.numel() / 3;
    let mut normals = vec![0.0; n * 3];
    let mut mask = vec![false; n];
    for (i, (a, b)) in gx.data().chunks(3).zip(gy.data().chunks(3)).enumerate() {
        let c = Vector3::new(a[0], a[1], a[2]).cross(&Vector3::new(b[0], b[1], b[2]));
        let len = c.norm();
        if len > NORMAL_EPS {
            normals[i * 3..i * 3 + 3].copy_from_slice((c / len).as_slice());
            mask[i] = true;
        }
    }
    Ok(NormalMap {
        normals: Tensor::new(gx.shape().to_vec(), normals)?,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unproject_corner_pixel() {
        let k = Intrinsics::new(1.0, 1.0, 2, 2).unwrap();
        let d = DepthMap::dense(Tensor::full(vec![2, 2], 5.0)).unwrap();
        let pm = unproject(&d, &k).unwrap();
        let p = pm.point(0, 0);
        assert_eq!((p.x, p.y, p.z), (-2.5, -2.5, 5.0));
    }

    #[test]
    fn principal_point_ray_is_centered() {
        let k = Intrinsics::new(3.0, 4.0, 3, 3).unwrap();
        let d = DepthMap::dense(Tensor::full(vec![3, 3], 7.0)).unwrap();
        let p = unproject(&d, &k).unwrap().point(1, 1);
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 7.0));
    }

    #[test]
    fn invalid_depth_is_rejected_only_where_valid() {
        let v = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        assert!(DepthMap::dense(v.clone()).is_err());
        assert!(DepthMap::new(v, vec![true, false]).is_ok());
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        assert!(Pose::new(m * 2.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn nearest_rotation_is_valid() {
        let m = Matrix3::new(1.0, 0.1, 0.0, -0.1, 1.0, 0.02, 0.0, 0.0, 0.9);
        let p = Pose::from_nearest_rotation(m, Vector3::zeros()).unwrap();
        assert!((p.rotation().determinant() - 1.0).abs() < 1e-12);
    }
}
