//! Colored, oriented point clouds as PLY 1.0.

use std::fs;
use std::path::Path;

use tco_autodiff::Tensor;
use tco_core::geometry::{pointmap_gradients, surface_normals, to_world, unproject, DepthMap, Intrinsics, Pose};
use tco_core::predictions::Predictions;

use crate::error::{format_err, io_err, Result, SceneError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyPoint {
    pub position: [f32; 3],
    pub color: [u8; 3],
    pub normal: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

const PROPERTIES: [(&str, &str); 9] = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
    ("float", "nx"),
    ("float", "ny"),
    ("float", "nz"),
];

/// One point per valid depth pixel, in view then row-major order. Pixels
/// whose normal is undefined get a zero normal.
pub fn cloud_from_depths(
    depths: &[DepthMap],
    poses: &[Pose],
    intrinsics: &[Intrinsics],
    images: &[Tensor],
) -> Result<Vec<PlyPoint>> {
    let n = depths.len();
    if poses.len() != n || intrinsics.len() != n || images.len() != n {
        return Err(SceneError::Spec(format!(
            "{n} depths, {} poses, {} intrinsics and {} images",
            poses.len(),
            intrinsics.len(),
            images.len()
        )));
    }
    let mut out = Vec::new();
    for i in 0..n {
        let pm = to_world(&unproject(&depths[i], &intrinsics[i])?, &poses[i])?;
        let (gx, gy) = pointmap_gradients(&pm)?;
        let normals = surface_normals(&gx, &gy)?;
        let img = images[i].data();
        if img.len() != pm.mask.len() * 3 {
            return Err(SceneError::Spec(format!("image {i} does not match its depth map")));
        }
        for (p, &valid) in pm.mask.iter().enumerate() {
            if !valid {
                continue;
            }
            let f = |t: &[f64]| [t[3 * p] as f32, t[3 * p + 1] as f32, t[3 * p + 2] as f32];
            let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(PlyPoint {
                position: f(pm.points.data()),
                color: [c(img[3 * p]), c(img[3 * p + 1]), c(img[3 * p + 2])],
                normal: if normals.mask[p] { f(normals.normals.data()) } else { [0.0; 3] },
            });
        }
    }
    Ok(out)
}

pub fn cloud_from_predictions(preds: &Predictions, images: &[Tensor]) -> Result<Vec<PlyPoint>> {
    let depths: Vec<DepthMap> = preds.views.iter().map(|v| v.depth.clone()).collect();
    let ks: Vec<Intrinsics> = preds.views.iter().map(|v| v.intrinsics).collect();
    cloud_from_depths(&depths, &preds.poses(), &ks, images)
}

pub fn encode_ply(points: &[PlyPoint], format: PlyFormat) -> Vec<u8> {
    let mut out = String::from("ply\n");
    out += match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    };
    out += &format!("element vertex {}\n", points.len());
    for (ty, name) in PROPERTIES {
        out += &format!("property {ty} {name}\n");
    }
    out += "end_header\n";
    let mut bytes = out.into_bytes();
    for p in points {
        match format {
            PlyFormat::Ascii => {
                let [x, y, z] = p.position;
                let [r, g, b] = p.color;
                let [nx, ny, nz] = p.normal;
                bytes.extend(format!("{x} {y} {z} {r} {g} {b} {nx} {ny} {nz}\n").into_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p.position {
                    bytes.extend(v.to_le_bytes());
                }
                bytes.extend(p.color);
                for v in p.normal {
                    bytes.extend(v.to_le_bytes());
                }
            }
        }
    }
    bytes
}

pub fn write_ply(path: &Path, points: &[PlyPoint], format: PlyFormat) -> Result<()> {
    fs::write(path, encode_ply(points, format)).map_err(io_err(path))
}

pub fn read_ply(path: &Path) -> Result<Vec<PlyPoint>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ply(&bytes).map_err(|d| format_err(path, d))
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

fn read_scalar(ty: &str, b: &[u8]) -> f64 {
    match ty {
        "char" | "int8" => b[0] as i8 as f64,
        "uchar" | "uint8" => b[0] as f64,
        "short" | "int16" => i16::from_le_bytes([b[0], b[1]]) as f64,
        "ushort" | "uint16" => u16::from_le_bytes([b[0], b[1]]) as f64,
        "int" | "int32" => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
        "uint" | "uint32" => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
        "float" | "float32" => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
        _ => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
    }
}

/// Parse the vertex element of an ASCII or little-endian PLY holding at
/// least the x, y, z, red, green, blue, nx, ny, nz properties.
pub fn decode_ply(bytes: &[u8]) -> std::result::Result<Vec<PlyPoint>, String> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?
        + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not UTF-8")?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "ascii", "1.0"] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", "1.0"] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", f, ..] => return Err(format!("unsupported format {f}")),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err("vertex element declared twice".into());
                }
                count = Some(n.parse::<usize>().map_err(|_| format!("bad vertex count {n}"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    return Err("elements before vertex are not supported".into());
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err("list properties on vertices are not supported".into()),
            ["property", ty, name] if in_vertex => {
                scalar_size(ty).ok_or_else(|| format!("unknown property type {ty}"))?;
                props.push((ty.to_string(), name.to_string()));
            }
            _ => {}
        }
    }
    let format = format.ok_or("missing format line")?;
    let count = count.ok_or("missing vertex element")?;
    let index = |name: &str| props.iter().position(|(_, n)| n == name).ok_or(format!("missing property {name}"));
    let idx: Vec<usize> = PROPERTIES.iter().map(|(_, n)| index(n)).collect::<std::result::Result<_, _>>()?;

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[end..]).map_err(|_| "body is not UTF-8")?;
            let mut lines = body.lines().filter(|l| !l.trim().is_empty());
            for i in 0..count {
                let line = lines.next().ok_or(format!("expected {count} vertices, found {i}"))?;
                let row = line
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| format!("vertex {i}: bad value {v}")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if row.len() != props.len() {
                    return Err(format!("vertex {i}: {} values for {} properties", row.len(), props.len()));
                }
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = props.iter().map(|(t, _)| scalar_size(t).expect("checked")).sum();
            let body = &bytes[end..];
            if body.len() < stride * count {
                return Err(format!("expected {} body bytes, found {}", stride * count, body.len()));
            }
            for chunk in body.chunks_exact(stride).take(count) {
                let mut off = 0;
                let mut row = Vec::with_capacity(props.len());
                for (ty, _) in &props {
                    let sz = scalar_size(ty).expect("checked");
                    row.push(read_scalar(ty, &chunk[off..off + sz]));
                    off += sz;
                }
                rows.push(row);
            }
        }
    }
    Ok(rows
        .iter()
        .map(|r| {
            let g = |k: usize| r[idx[k]];
            PlyPoint {
                position: [g(0) as f32, g(1) as f32, g(2) as f32],
                color: [g(3) as u8, g(4) as u8, g(5) as u8],
                normal: [g(6) as f32, g(7) as f32, g(8) as f32],
            }
        })
        .collect())
}
