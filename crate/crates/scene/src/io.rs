//! Scene directories on disk.
//!
//! ```text
//! images/000.png        RGB, one per view, in lexicographic order
//! depth/000.tcod        optional depth prior
//! poses.json            optional pose prior, camera-to-world 3x4 row-major
//! intrinsics.json       optional intrinsics prior
//! gt/{depth,poses.json,intrinsics.json}   optional ground truth
//! ```
//!
//! A `.tcod` file is the magic `TCOD`, little-endian `u32` width, height and a
//! reserved word, then `width * height` little-endian `f32` depths. Zero marks
//! a pixel with no depth.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tco_autodiff::Tensor;
use tco_core::geometry::{DepthMap, Intrinsics, Pose};

use crate::error::{format_err, io_err, Result};
use crate::synth::{GroundTruth, Scene};

pub const DEPTH_MAGIC: &[u8; 4] = b"TCOD";

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    width: usize,
    height: usize,
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let mut buf = Vec::with_capacity(16 + 4 * h * w);
    buf.extend_from_slice(DEPTH_MAGIC);
    for v in [w as u32, h as u32, 0] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (&d, &m) in depth.values().data().iter().zip(depth.mask()) {
        let v = if m { d as f32 } else { 0.0 };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 || &bytes[..4] != DEPTH_MAGIC {
        return Err(format_err(path, "not a depth file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (w, h) = (word(0), word(1));
    if w == 0 || h == 0 {
        return Err(format_err(path, format!("empty depth map {w}x{h}")));
    }
    if bytes.len() != 16 + 4 * w * h {
        return Err(format_err(path, format!("expected {} bytes for {w}x{h}, found {}", 16 + 4 * w * h, bytes.len())));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(format_err(path, format!("invalid depth {} at pixel {bad}", values[bad])));
    }
    let mask = values.iter().map(|&v| v > 0.0).collect();
    Ok(DepthMap::new(Tensor::new(vec![h, w], values)?, mask)?)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(format_err(path, format!("expected an [H, W, 3] image, got {s:?}")));
    }
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, s[1] as u32, s[0] as u32, image::ColorType::Rgb8)
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data)?)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let rows: Vec<[[f64; 4]; 3]> = poses.iter().map(Pose::to_rows).collect();
    write_json(path, &rows)
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let rows: Vec<[[f64; 4]; 3]> = read_json(path)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| Pose::from_rows(r).map_err(|e| format_err(path, format!("pose {i}: {e}"))))
        .collect()
}

pub fn write_intrinsics(path: &Path, ks: &[Intrinsics]) -> Result<()> {
    let recs: Vec<IntrinsicsRecord> = ks
        .iter()
        .map(|k| IntrinsicsRecord { fx: k.fx, fy: k.fy, width: k.width, height: k.height })
        .collect();
    write_json(path, &recs)
}

pub fn read_intrinsics(path: &Path) -> Result<Vec<Intrinsics>> {
    let recs: Vec<IntrinsicsRecord> = read_json(path)?;
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            Intrinsics::new(r.fx, r.fy, r.width, r.height).map_err(|e| format_err(path, format!("view {i}: {e}")))
        })
        .collect()
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| format_err(path, e.to_string()))?;
    w.write_all(b"\n").map_err(io_err(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let mut text = String::new();
    BufReader::new(fs::File::open(path).map_err(io_err(path))?)
        .read_to_string(&mut text)
        .map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn view_name(i: usize, ext: &str) -> String {
    format!("{i:03}.{ext}")
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn write_depths(dir: &Path, depths: &[DepthMap]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, d) in depths.iter().enumerate() {
        write_depth(&dir.join(view_name(i, "tcod")), d)?;
    }
    Ok(())
}

fn read_depths(dir: &Path, n_views: usize) -> Result<Option<Vec<DepthMap>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let files = sorted_files(dir, "tcod")?;
    if files.len() != n_views {
        return Err(format_err(dir, format!("{} depth maps for {n_views} views", files.len())));
    }
    files.iter().map(|p| read_depth(p)).collect::<Result<Vec<_>>>().map(Some)
}

fn optional<T>(path: &Path, read: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

fn check_len<T>(path: &Path, items: &Option<Vec<T>>, n_views: usize) -> Result<()> {
    match items {
        Some(v) if v.len() != n_views => {
            Err(format_err(path, format!("{} entries for {n_views} views", v.len())))
        }
        _ => Ok(()),
    }
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for (i, img) in scene.images.iter().enumerate() {
        write_image(&images.join(view_name(i, "png")), img)?;
    }
    if let Some(d) = &scene.depths {
        write_depths(&dir.join("depth"), d)?;
    }
    if let Some(p) = &scene.poses {
        write_poses(&dir.join("poses.json"), p)?;
    }
    if let Some(k) = &scene.intrinsics {
        write_intrinsics(&dir.join("intrinsics.json"), k)?;
    }
    if let Some(gt) = &scene.gt {
        write_geometry(&dir.join("gt"), gt)?;
    }
    Ok(())
}

/// Write `depth/`, `poses.json` and `intrinsics.json` under `dir`, the layout
/// of a scene's `gt/` and of saved predictions.
pub fn write_geometry(dir: &Path, g: &GroundTruth) -> Result<()> {
    write_depths(&dir.join("depth"), &g.depths)?;
    write_poses(&dir.join("poses.json"), &g.poses)?;
    write_intrinsics(&dir.join("intrinsics.json"), &g.intrinsics)
}

pub fn read_geometry(dir: &Path) -> Result<GroundTruth> {
    let poses = read_poses(&dir.join("poses.json"))?;
    let n = poses.len();
    let depths = read_depths(&dir.join("depth"), n)?.ok_or_else(|| format_err(dir, "missing depth/"))?;
    let intrinsics = read_intrinsics(&dir.join("intrinsics.json"))?;
    check_len(&dir.join("intrinsics.json"), &Some(intrinsics.clone()), n)?;
    if let Some(i) = (0..n).find(|&i| (depths[i].width(), depths[i].height()) != (intrinsics[i].width, intrinsics[i].height)) {
        return Err(format_err(dir, format!("view {i}: depth size differs from its intrinsics")));
    }
    Ok(GroundTruth { depths, poses, intrinsics })
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let images_dir = dir.join("images");
    let files = sorted_files(&images_dir, "png")?;
    if files.is_empty() {
        return Err(format_err(&images_dir, "no images"));
    }
    let images = files.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    let shape = images[0].shape().to_vec();
    if let Some(i) = images.iter().position(|im| im.shape() != shape.as_slice()) {
        return Err(format_err(&files[i], format!("size differs from the first image {shape:?}")));
    }
    let n = images.len();

    let depths = read_depths(&dir.join("depth"), n)?;
    let poses = optional(&dir.join("poses.json"), read_poses)?;
    check_len(&dir.join("poses.json"), &poses, n)?;
    let intrinsics = optional(&dir.join("intrinsics.json"), read_intrinsics)?;
    check_len(&dir.join("intrinsics.json"), &intrinsics, n)?;

    let g = dir.join("gt");
    let gt = if g.is_dir() {
        let gt = read_geometry(&g)?;
        check_len(&g.join("poses.json"), &Some(gt.poses.clone()), n)?;
        Some(gt)
    } else {
        None
    };
    Ok(Scene { images, depths, poses, intrinsics, gt })
}
