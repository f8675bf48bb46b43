//! Software rasterizer for 2D Gaussian splats.
//!
//! Each splat is a planar Gaussian spanned by two tangent axes. A pixel ray is
//! intersected with the splat plane and the Gaussian is evaluated at the hit in
//! tangent coordinates. Splats are composited front to back in the order of
//! their center depth in the target camera.
//!
//! The whole rasterization is a single tape operation with a hand-written
//! vector-Jacobian product, producing `[H, W, 5]` = (r, g, b, Σ w z, Σ w).

use std::cmp::Ordering;
use std::path::Path;
use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};
use tco_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::splat::{quaternion_to_matrix, CameraVars, DiffSplats, SplatSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Gaussian support in standard deviations.
    pub cutoff_sigma: f64,
    /// Per-splat opacity times Gaussian below which a hit is ignored.
    pub min_weight: f64,
    /// Floor on alpha when normalizing composited depth.
    pub alpha_eps: f64,
    /// Near plane in scene units.
    pub near: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            cutoff_sigma: 3.0,
            min_weight: 1e-4,
            alpha_eps: 1e-8,
            near: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RenderVars<'t> {
    /// `[H, W, 3]`
    pub color: Var<'t>,
    /// Expected depth `[H, W]`.
    pub depth: Var<'t>,
    /// `[H, W]`
    pub alpha: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Tensor,
    pub depth: Tensor,
    pub alpha: Tensor,
}

impl RenderVars<'_> {
    pub fn values(&self) -> RenderOutput {
        RenderOutput {
            color: (*self.color.value()).clone(),
            depth: (*self.depth.value()).clone(),
            alpha: (*self.alpha.value()).clone(),
        }
    }
}

/// A splat expressed in the target camera frame.
#[derive(Clone, Copy, Debug)]
struct CamSplat {
    index: usize,
    mu: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    n: Vector3<f64>,
    su: f64,
    sv: f64,
    opacity: f64,
    color: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    /// Position in the sorted splat list.
    rank: u32,
    g: f64,
    alpha: f64,
    tau: f64,
    a: f64,
    b: f64,
}

struct Raster {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    splats: Vec<CamSplat>,
    /// `hits[offsets[p]..offsets[p + 1]]` are the hits of pixel `p`, front first.
    offsets: Vec<usize>,
    hits: Vec<Hit>,
}

impl Raster {
    fn ray(&self, p: usize) -> Vector3<f64> {
        let (x, y) = (p % self.width, p / self.width);
        Vector3::new(
            (x as f64 + 0.5 - self.width as f64 / 2.0) / self.fx,
            (y as f64 + 0.5 - self.height as f64 / 2.0) / self.fy,
            1.0,
        )
    }
}

fn vec3(data: &[f64], k: usize) -> Vector3<f64> {
    Vector3::new(data[k * 3], data[k * 3 + 1], data[k * 3 + 2])
}

fn order(a: &CamSplat, b: &CamSplat) -> Ordering {
    let key = |s: &CamSplat| {
        [s.mu.z, s.mu.x, s.mu.y, s.opacity, s.su, s.sv, s.color[0], s.color[1], s.color[2]]
    };
    let (ka, kb) = (key(a), key(b));
    ka.iter()
        .zip(&kb)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

struct Inputs<'a> {
    centers: &'a [f64],
    tu: &'a [f64],
    tv: &'a [f64],
    radii: &'a [f64],
    opacity: &'a [f64],
    colors: &'a [f64],
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    fx: f64,
    fy: f64,
}

fn rasterize(inp: &Inputs<'_>, width: usize, height: usize, s: &RenderSettings) -> Raster {
    let rt = inp.rotation.transpose();
    let m = inp.opacity.len();
    let mut splats: Vec<CamSplat> = (0..m)
        .map(|k| {
            let mu = rt * (vec3(inp.centers, k) - inp.translation);
            let u = rt * vec3(inp.tu, k);
            let v = rt * vec3(inp.tv, k);
            CamSplat {
                index: k,
                mu,
                u,
                v,
                n: u.cross(&v),
                su: inp.radii[k * 2],
                sv: inp.radii[k * 2 + 1],
                opacity: inp.opacity[k],
                color: [inp.colors[k * 3], inp.colors[k * 3 + 1], inp.colors[k * 3 + 2]],
            }
        })
        .filter(|c| c.mu.z > s.near && c.su > 1e-12 && c.sv > 1e-12 && c.opacity > 0.0)
        .collect();
    splats.sort_by(order);

    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let mut bins: Vec<Vec<Hit>> = vec![Vec::new(); width * height];
    let raster_ray = |x: usize, y: usize| {
        Vector3::new((x as f64 + 0.5 - cx) / inp.fx, (y as f64 + 0.5 - cy) / inp.fy, 1.0)
    };
    let cut2 = s.cutoff_sigma * s.cutoff_sigma;
    for (rank, sp) in splats.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = bbox(sp, s, inp.fx, inp.fy, width, height) else {
            continue;
        };
        let num = sp.mu.dot(&sp.n);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = raster_ray(x, y);
                let den = d.dot(&sp.n);
                if den.abs() < 1e-12 {
                    continue;
                }
                let tau = num / den;
                if tau <= s.near {
                    continue;
                }
                let hit = d * tau - sp.mu;
                let a = hit.dot(&sp.u) / sp.su;
                let b = hit.dot(&sp.v) / sp.sv;
                let q = a * a + b * b;
                if q > cut2 {
                    continue;
                }
                let g = (-0.5 * q).exp();
                let alpha = sp.opacity * g;
                if alpha < s.min_weight {
                    continue;
                }
                bins[y * width + x].push(Hit { rank: rank as u32, g, alpha, tau, a, b });
            }
        }
    }
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut hits = Vec::new();
    offsets.push(0);
    for b in bins {
        hits.extend(b);
        offsets.push(hits.len());
    }
    Raster { width, height, fx: inp.fx, fy: inp.fy, splats, offsets, hits }
}

/// Pixel bounding box of the splat's cutoff rectangle, or `None` if it misses the image.
fn bbox(
    sp: &CamSplat,
    s: &RenderSettings,
    fx: f64,
    fy: f64,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (width as f64, height as f64);
    let eu = sp.u * (s.cutoff_sigma * sp.su);
    let ev = sp.v * (s.cutoff_sigma * sp.sv);
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (su, sv) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
        let c = sp.mu + eu * su + ev * sv;
        if c.z <= s.near {
            return Some((0, width - 1, 0, height - 1));
        }
        let px = fx * c.x / c.z + w / 2.0;
        let py = fy * c.y / c.z + h / 2.0;
        lo_x = lo_x.min(px);
        hi_x = hi_x.max(px);
        lo_y = lo_y.min(py);
        hi_y = hi_y.max(py);
    }
    // pixel x covers centers x + 0.5
    let x0 = (lo_x - 0.5).ceil().max(0.0);
    let x1 = (hi_x - 0.5).floor().min(w - 1.0);
    let y0 = (lo_y - 0.5).ceil().max(0.0);
    let y1 = (hi_y - 0.5).floor().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

fn composite(r: &Raster) -> Tensor {
    let n = r.width * r.height;
    let mut out = vec![0.0; n * 5];
    for p in 0..n {
        let mut t = 1.0;
        let o = &mut out[p * 5..p * 5 + 5];
        for hit in &r.hits[r.offsets[p]..r.offsets[p + 1]] {
            let sp = &r.splats[hit.rank as usize];
            let w = hit.alpha * t;
            o[0] += w * sp.color[0];
            o[1] += w * sp.color[1];
            o[2] += w * sp.color[2];
            o[3] += w * hit.tau;
            o[4] += w;
            t *= 1.0 - hit.alpha;
        }
    }
    Tensor::new(vec![r.height, r.width, 5], out).expect("raster shape")
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mu: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    su: f64,
    sv: f64,
    opacity: f64,
    color: [f64; 3],
}

fn backward(r: &Raster, grad: &Tensor, inp: &Inputs<'_>) -> Vec<Option<Tensor>> {
    let gd = grad.data();
    let mut sg = vec![SplatGrad::default(); r.splats.len()];
    let (mut gfx, mut gfy) = (0.0, 0.0);
    let mut weights: Vec<(f64, f64)> = Vec::new();
    for p in 0..r.width * r.height {
        let hits = &r.hits[r.offsets[p]..r.offsets[p + 1]];
        if hits.is_empty() {
            continue;
        }
        let g = &gd[p * 5..p * 5 + 5];
        // forward transmittance per hit
        weights.clear();
        let mut t = 1.0;
        for hit in hits {
            weights.push((t, hit.alpha * t));
            t *= 1.0 - hit.alpha;
        }
        let d = r.ray(p);
        let mut rest = 0.0;
        for (j, hit) in hits.iter().enumerate().rev() {
            let sp = &r.splats[hit.rank as usize];
            let (tk, wk) = weights[j];
            let s_k = g[0] * sp.color[0] + g[1] * sp.color[1] + g[2] * sp.color[2] + g[3] * hit.tau + g[4];
            let d_alpha = tk * (s_k - rest);
            rest = hit.alpha * s_k + (1.0 - hit.alpha) * rest;

            let acc = &mut sg[hit.rank as usize];
            acc.color[0] += g[0] * wk;
            acc.color[1] += g[1] * wk;
            acc.color[2] += g[2] * wk;
            acc.opacity += d_alpha * hit.g;
            let d_q = d_alpha * sp.opacity * (-0.5 * hit.g);
            let d_a = 2.0 * hit.a * d_q;
            let d_b = 2.0 * hit.b * d_q;
            let x = d * hit.tau - sp.mu;
            let d_x = sp.u * (d_a / sp.su) + sp.v * (d_b / sp.sv);
            let mut d_u = x * (d_a / sp.su);
            let mut d_v = x * (d_b / sp.sv);
            acc.su -= d_a * hit.a / sp.su;
            acc.sv -= d_b * hit.b / sp.sv;
            let d_tau = d_x.dot(&d) + g[3] * wk;
            let mut d_d = d_x * hit.tau;
            let mut d_mu = -d_x;
            let den = d.dot(&sp.n);
            let d_num = d_tau / den;
            let d_den = -d_tau * hit.tau / den;
            d_mu += sp.n * d_num;
            let mut d_n = sp.mu * d_num;
            d_d += sp.n * d_den;
            d_n += d * d_den;
            d_u += sp.v.cross(&d_n);
            d_v += d_n.cross(&sp.u);
            acc.mu += d_mu;
            acc.u += d_u;
            acc.v += d_v;
            gfx -= d_d.x * d.x / r.fx;
            gfy -= d_d.y * d.y / r.fy;
        }
    }

    let m = inp.opacity.len();
    let mut g_centers = vec![0.0; m * 3];
    let mut g_tu = vec![0.0; m * 3];
    let mut g_tv = vec![0.0; m * 3];
    let mut g_radii = vec![0.0; m * 2];
    let mut g_opacity = vec![0.0; m];
    let mut g_colors = vec![0.0; m * 3];
    let mut g_rot = Matrix3::<f64>::zeros();
    let mut g_trans = Vector3::<f64>::zeros();
    let rot = inp.rotation;
    for (sp, acc) in r.splats.iter().zip(&sg) {
        let k = sp.index;
        // mu_c = Rᵀ (mu - t), u_c = Rᵀ e1, v_c = Rᵀ e2
        let world_mu = rot * acc.mu;
        g_centers[k * 3..k * 3 + 3].copy_from_slice(world_mu.as_slice());
        g_trans -= world_mu;
        let rel = vec3(inp.centers, k) - inp.translation;
        g_rot += rel * acc.mu.transpose();
        g_tu[k * 3..k * 3 + 3].copy_from_slice((rot * acc.u).as_slice());
        g_rot += vec3(inp.tu, k) * acc.u.transpose();
        g_tv[k * 3..k * 3 + 3].copy_from_slice((rot * acc.v).as_slice());
        g_rot += vec3(inp.tv, k) * acc.v.transpose();
        g_radii[k * 2] = acc.su;
        g_radii[k * 2 + 1] = acc.sv;
        g_opacity[k] = acc.opacity;
        g_colors[k * 3..k * 3 + 3].copy_from_slice(&acc.color);
    }
    let g_rot_data = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| g_rot[(i, j)]).collect();
    vec![
        Some(Tensor::new(vec![m, 3], g_centers).expect("shape")),
        Some(Tensor::new(vec![m, 3], g_tu).expect("shape")),
        Some(Tensor::new(vec![m, 3], g_tv).expect("shape")),
        Some(Tensor::new(vec![m, 2], g_radii).expect("shape")),
        Some(Tensor::new(vec![m], g_opacity).expect("shape")),
        Some(Tensor::new(vec![m, 3], g_colors).expect("shape")),
        Some(Tensor::new(vec![3, 3], g_rot_data).expect("shape")),
        Some(Tensor::vector(g_trans.iter().copied().collect())),
        Some(Tensor::vector(vec![gfx, gfy])),
    ]
}

fn inputs_from<'a>(v: &'a [Rc<Tensor>]) -> Inputs<'a> {
    let f = v[8].data();
    Inputs {
        centers: v[0].data(),
        tu: v[1].data(),
        tv: v[2].data(),
        radii: v[3].data(),
        opacity: v[4].data(),
        colors: v[5].data(),
        rotation: Matrix3::from_row_slice(v[6].data()),
        translation: Vector3::from_column_slice(v[7].data()),
        fx: f[0],
        fy: f[1],
    }
}

fn check_splat_shapes(s: &DiffSplats<'_>) -> Result<()> {
    let m = s.len();
    let expect = [
        ("centers", s.centers.shape(), vec![m, 3]),
        ("tangent_u", s.tangent_u.shape(), vec![m, 3]),
        ("tangent_v", s.tangent_v.shape(), vec![m, 3]),
        ("radii", s.radii.shape(), vec![m, 2]),
        ("opacity", s.opacity.shape(), vec![m]),
        ("colors", s.colors.shape(), vec![m, 3]),
    ];
    for (name, got, want) in expect {
        if got != want {
            return Err(Error::Shape(format!("splat {name} has shape {got:?}, expected {want:?}")));
        }
    }
    Ok(())
}

/// Rasterize splats into the target camera on the tape.
pub fn render<'t>(splats: &DiffSplats<'t>, target: &CameraVars<'t>, settings: &RenderSettings) -> Result<RenderVars<'t>> {
    check_splat_shapes(splats)?;
    if target.rotation.shape() != [3, 3] || target.translation.shape() != [3] || target.focal.shape() != [2] {
        return Err(Error::Shape("target camera must be [3, 3], [3] and [2]".into()));
    }
    let f = target.focal.value();
    if !(f.data()[0] > 0.0 && f.data()[1] > 0.0) {
        return Err(Error::InvalidIntrinsics(format!("focal {:?}", f.data())));
    }
    let (w, h) = (target.width, target.height);
    let parents = [
        splats.centers,
        splats.tangent_u,
        splats.tangent_v,
        splats.radii,
        splats.opacity,
        splats.colors,
        target.rotation,
        target.translation,
        target.focal,
    ];
    let values: Vec<Rc<Tensor>> = parents.iter().map(|p| p.value()).collect();
    let raster = rasterize(&inputs_from(&values), w, h, settings);
    let out = composite(&raster);
    let tape = target.rotation.tape();
    let raw = tape.custom(&parents, out, move |g, inputs, _| backward(&raster, g, &inputs_from(inputs)))?;
    let color = raw.slice(2, 0, 3)?;
    let weighted_z = raw.slice(2, 3, 4)?.reshape(&[h, w])?;
    let alpha = raw.slice(2, 4, 5)?.reshape(&[h, w])?;
    let depth = weighted_z.div(alpha.clamp(settings.alpha_eps, f64::INFINITY))?;
    Ok(RenderVars { color, depth, alpha })
}

/// Render a value-level splat set; tangent axes come from the quaternions.
pub fn render_splat_set(set: &SplatSet, pose: &Pose, k: &Intrinsics, settings: &RenderSettings) -> Result<RenderOutput> {
    let m = set.len();
    let mut centers = Vec::with_capacity(m * 3);
    let mut tu = Vec::with_capacity(m * 3);
    let mut tv = Vec::with_capacity(m * 3);
    let mut radii = Vec::with_capacity(m * 2);
    let mut opacity = Vec::with_capacity(m);
    let mut colors = Vec::with_capacity(m * 3);
    for s in &set.splats {
        let r = quaternion_to_matrix(&s.quaternion);
        centers.extend_from_slice(s.center.as_slice());
        tu.extend(r.column(0).iter());
        tv.extend(r.column(1).iter());
        radii.extend_from_slice(&s.radii);
        opacity.push(s.opacity);
        colors.extend_from_slice(&s.color);
    }
    let tape = Tape::new();
    let splats = DiffSplats {
        centers: tape.constant(Tensor::new(vec![m, 3], centers)?),
        tangent_u: tape.constant(Tensor::new(vec![m, 3], tu)?),
        tangent_v: tape.constant(Tensor::new(vec![m, 3], tv)?),
        radii: tape.constant(Tensor::new(vec![m, 2], radii)?),
        opacity: tape.constant(Tensor::new(vec![m], opacity)?),
        colors: tape.constant(Tensor::new(vec![m, 3], colors)?),
        provenance: set.provenance.clone(),
    };
    let cam = CameraVars::constant(&tape, pose, k);
    Ok(render(&splats, &cam, settings)?.values())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpFormat {
    Png,
    Ppm,
}

/// Write an `[H, W, 3]` image in `[0, 1]` (values are clamped) for inspection.
pub fn dump_image(path: &Path, color: &Tensor, format: DumpFormat) -> Result<()> {
    let (h, w) = match color.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Shape(format!("expected [H, W, 3], got {s:?}"))),
    };
    let bytes: Vec<u8> = color.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    match format {
        DumpFormat::Ppm => {
            let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
            buf.extend_from_slice(&bytes);
            std::fs::write(path, buf)?;
        }
        DumpFormat::Png => {
            image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    Ok(())
}
