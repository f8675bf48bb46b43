use std::fs;

use tco_core::geometry::Pose;
use tco_scene::io::{read_depth, read_poses, write_depth, write_poses};
use tco_scene::ply::{cloud_from_depths, decode_ply, encode_ply, read_ply, write_ply, PlyFormat};
use tco_scene::{read_scene, synth_scene, write_scene, Layout, SceneError, SynthSpec};

fn scene() -> tco_scene::Scene {
    synth_scene(&SynthSpec { layout: Layout::TwoWalls, texture_seed: 4, ..SynthSpec::default() }).unwrap()
}

#[test]
fn scene_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene();
    write_scene(dir.path(), &s).unwrap();
    let back = read_scene(dir.path()).unwrap();
    assert_eq!(back, s);
    assert!(dir.path().join("images/000.png").exists());
    assert!(dir.path().join("gt/depth/005.tcod").exists());
}

#[test]
fn binary_formats_rewrite_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    write_scene(&a, &scene()).unwrap();
    write_scene(&b, &read_scene(&a).unwrap()).unwrap();
    for rel in ["images/003.png", "depth/003.tcod", "gt/depth/000.tcod", "poses.json", "intrinsics.json"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn depth_header_is_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.tcod");
    let s = scene();
    write_depth(&p, &s.depths.as_ref().unwrap()[0]).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"TCOD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 32);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 32);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
    assert_eq!(bytes.len(), 16 + 4 * 32 * 32);
    let first = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    assert_eq!(first, s.depths.as_ref().unwrap()[0].values().data()[0]);
}

#[test]
fn malformed_files_report_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.tcod");
    fs::write(&p, b"TCOD\x02\0\0\0\x02\0\0\0\0\0\0\0short").unwrap();
    let err = read_depth(&p).unwrap_err();
    assert!(matches!(err, SceneError::Format { .. }));
    assert!(err.to_string().contains("bad.tcod"));
    fs::write(&p, b"PFM!").unwrap();
    assert!(read_depth(&p).is_err());
    let missing = read_depth(&dir.path().join("none.tcod")).unwrap_err();
    assert!(matches!(missing, SceneError::Io { .. }));

    let j = dir.path().join("poses.json");
    fs::write(&j, "[[[2,0,0,0],[0,1,0,0],[0,0,1,0]]]").unwrap();
    assert!(read_poses(&j).is_err());
    write_poses(&j, &[Pose::identity()]).unwrap();
    assert_eq!(read_poses(&j).unwrap(), vec![Pose::identity()]);
}

#[test]
fn inconsistent_scene_directories_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene();
    write_scene(dir.path(), &s).unwrap();
    write_poses(&dir.path().join("poses.json"), &s.poses.as_ref().unwrap()[..3]).unwrap();
    assert!(read_scene(dir.path()).is_err());

    let d2 = tempfile::tempdir().unwrap();
    write_scene(d2.path(), &s).unwrap();
    fs::remove_file(d2.path().join("depth/002.tcod")).unwrap();
    assert!(read_scene(d2.path()).is_err());

    let empty = tempfile::tempdir().unwrap();
    fs::create_dir(empty.path().join("images")).unwrap();
    assert!(read_scene(empty.path()).is_err());
}

#[test]
fn priors_are_optional() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = scene();
    s.poses = None;
    s.depths = None;
    s.intrinsics = None;
    s.gt = None;
    write_scene(dir.path(), &s).unwrap();
    assert_eq!(read_scene(dir.path()).unwrap(), s);
}

fn gt_cloud(s: &tco_scene::Scene) -> Vec<tco_scene::ply::PlyPoint> {
    let gt = s.gt.as_ref().unwrap();
    cloud_from_depths(&gt.depths, &gt.poses, &gt.intrinsics, &s.images).unwrap()
}

#[test]
fn ply_point_count_is_the_number_of_valid_pixels() {
    let s = scene();
    let n: usize = s.gt.as_ref().unwrap().depths.iter().map(|d| d.valid_count()).sum();
    assert_eq!(gt_cloud(&s).len(), n);
}

#[test]
fn ply_round_trips_in_both_encodings() {
    let dir = tempfile::tempdir().unwrap();
    let pts = gt_cloud(&scene());
    for (name, fmt) in [("a.ply", PlyFormat::Ascii), ("b.ply", PlyFormat::BinaryLittleEndian)] {
        let p = dir.path().join(name);
        write_ply(&p, &pts, fmt).unwrap();
        assert_eq!(read_ply(&p).unwrap(), pts, "{name}");
        let again = encode_ply(&read_ply(&p).unwrap(), fmt);
        assert_eq!(again, fs::read(&p).unwrap(), "{name}");
    }
}

#[test]
fn ply_header_follows_the_standard() {
    let pts = gt_cloud(&scene());
    let bytes = encode_ply(&pts, PlyFormat::BinaryLittleEndian);
    let end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap();
    let header = std::str::from_utf8(&bytes[..end]).unwrap();
    let lines: Vec<&str> = header.lines().collect();
    assert_eq!(lines[0], "ply");
    assert_eq!(lines[1], "format binary_little_endian 1.0");
    assert_eq!(lines[2], format!("element vertex {}", pts.len()));
    let props: Vec<&str> = lines[3..].to_vec();
    assert_eq!(
        props,
        [
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "property float nx",
            "property float ny",
            "property float nz",
        ]
    );
    assert_eq!(bytes.len() - end - 11, pts.len() * 27);
}

#[test]
fn foreign_ply_layouts_parse() {
    // reordered properties, doubles, an extra property and a trailing face element
    let text = "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 2\nproperty double nx\nproperty double ny\nproperty double nz\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty float quality\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n0 0 1 1 2 3 10 20 30 0.5\n1 0 0 4 5 6 40 50 60 0.5\n";
    let pts = decode_ply(text.as_bytes()).unwrap();
    assert_eq!(pts.len(), 2);
    assert_eq!(pts[1].position, [4.0, 5.0, 6.0]);
    assert_eq!(pts[1].color, [40, 50, 60]);
    assert_eq!(pts[0].normal, [0.0, 0.0, 1.0]);
    assert!(decode_ply(b"ply\nformat binary_big_endian 1.0\nend_header\n").is_err());
    assert!(decode_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n").is_err());
}
