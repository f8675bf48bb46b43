mod common;

use common::*;
use nalgebra::Vector3;
use rand::Rng;
use tco_autodiff::{gradcheck, Tape, Tensor, Var};
use tco_core::geometry::{Intrinsics, Pose};
use tco_core::render::{render, render_splat_set, RenderSettings};
use tco_core::splat::{derive_splat_set, CameraVars, DiffSplats, Splat, SplatSet};

fn smooth_settings() -> RenderSettings {
    RenderSettings {
        cutoff_sigma: 8.0,
        min_weight: 0.0,
        ..RenderSettings::default()
    }
}

fn single(center: Vector3<f64>, color: [f64; 3], opacity: f64, radius: f64) -> Splat {
    Splat {
        center,
        color,
        opacity,
        quaternion: [1.0, 0.0, 0.0, 0.0],
        radii: [radius, radius],
    }
}

fn set(splats: Vec<Splat>) -> SplatSet {
    let provenance = (0..splats.len())
        .map(|i| tco_core::splat::Provenance { view: 0, x: i, y: 0 })
        .collect();
    SplatSet { splats, provenance }
}

#[test]
fn single_splat_on_its_center_pixel() {
    let k = Intrinsics::new(4.0, 4.0, 4, 4).unwrap();
    // ray through pixel (2, 2) center hits (0.125, 0.125) * z
    let c = Vector3::new(0.5 / 4.0 * 2.0, 0.5 / 4.0 * 2.0, 2.0);
    let s = set(vec![single(c, [0.2, 0.4, 0.6], 0.9, 0.3)]);
    let out = render_splat_set(&s, &Pose::identity(), &k, &RenderSettings::default()).unwrap();
    let a = out.alpha.at(&[2, 2]);
    assert!((a - 0.9).abs() < 1e-12);
    for ch in 0..3 {
        let want = [0.2, 0.4, 0.6][ch];
        assert!((out.color.at(&[2, 2, ch]) / a - want).abs() < 1e-12);
    }
    assert!((out.depth.at(&[2, 2]) - 2.0).abs() < 1e-12);
}

#[test]
fn front_splat_occludes() {
    let k = Intrinsics::new(4.0, 4.0, 4, 4).unwrap();
    let front = single(Vector3::new(0.0, 0.0, 1.0), [1.0, 0.0, 0.0], 0.999999, 10.0);
    let back = single(Vector3::new(0.0, 0.0, 3.0), [0.0, 0.0, 1.0], 0.9, 1.0);
    let out = render_splat_set(&set(vec![back.clone(), front.clone()]), &Pose::identity(), &k, &RenderSettings::default()).unwrap();
    let a = out.alpha.at(&[2, 2]);
    assert!(out.color.at(&[2, 2, 0]) / a > 0.99);
    assert!(out.color.at(&[2, 2, 2]) / a < 0.01);
    assert!((out.depth.at(&[2, 2]) - 1.0).abs() < 0.02);
}

#[test]
fn no_splats_renders_empty() {
    let k = intrinsics(8);
    let out = render_splat_set(&SplatSet::default(), &Pose::identity(), &k, &RenderSettings::default()).unwrap();
    assert!(out.alpha.data().iter().all(|&a| a == 0.0));
    assert!(out.color.data().iter().all(|&a| a == 0.0));
}

#[test]
fn self_reprojection_of_textured_plane() {
    let k = intrinsics(32);
    for (i, pose) in [Pose::identity(), look_at(Vector3::new(0.7, -0.3, 0.2), Vector3::new(0.0, 0.0, 4.0))]
        .iter()
        .enumerate()
    {
        let plane = Plane::new(Vector3::new(0.0, 0.0, 4.0), Vector3::new(0.2, -0.1, 1.0));
        let (img, depth) = render_plane(&plane, pose, &k, 2.0);
        let conf = Tensor::full(vec![32, 32], 50.0);
        let splats = derive_splat_set(0, &img, &depth, &conf, pose, &k, 0.5, None).unwrap();
        assert_eq!(splats.len(), 32 * 32);
        let out = render_splat_set(&splats, pose, &k, &RenderSettings::default()).unwrap();
        let mut err = [0.0; 3];
        for p in 0..32 * 32 {
            let a = out.alpha.data()[p];
            for ch in 0..3 {
                err[ch] += (out.color.data()[p * 3 + ch] / a - img.data()[p * 3 + ch]).abs();
            }
        }
        for e in err {
            assert!(e / 1024.0 < 0.05, "case {i}: channel error {}", e / 1024.0);
        }
        // planar depth within 1e-3 wherever alpha > 0.5
        for p in 0..32 * 32 {
            if out.alpha.data()[p] > 0.5 {
                assert!((out.depth.data()[p] - depth.data()[p]).abs() < 1e-3 * depth.data()[p].max(1.0) * 4.0);
            }
        }
    }
}

#[test]
fn order_invariance_and_rigid_gauge() {
    let mut r = rng(3);
    let k = intrinsics(16);
    let pose = look_at(Vector3::new(0.3, 0.1, -0.2), Vector3::new(0.0, 0.0, 3.0));
    let plane = Plane::new(Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.1, 0.3, 1.0));
    let (img, depth) = render_plane(&plane, &pose, &k, 3.0);
    let conf = Tensor::full(vec![16, 16], 5.0);
    let splats = derive_splat_set(0, &img, &depth, &conf, &pose, &k, 0.5, None).unwrap();
    let target = look_at(Vector3::new(-0.4, 0.2, 0.1), Vector3::new(0.0, 0.0, 3.0));
    let base = render_splat_set(&splats, &target, &k, &RenderSettings::default()).unwrap();

    let mut shuffled = splats.clone();
    for i in (1..shuffled.len()).rev() {
        let j = r.random_range(0..=i);
        shuffled.splats.swap(i, j);
        shuffled.provenance.swap(i, j);
    }
    let out = render_splat_set(&shuffled, &target, &k, &RenderSettings::default()).unwrap();
    assert_eq!(out, base);

    let g = random_pose(&mut r, 1.0, 2.0);
    let moved = SplatSet {
        splats: splats
            .splats
            .iter()
            .map(|s| {
                let q = tco_core::splat::quaternion_to_matrix(&s.quaternion);
                let rq = g.rotation() * q;
                Splat {
                    center: g.transform_point(&s.center),
                    quaternion: tco_core::splat::frame_to_quaternion(
                        &rq.column(0).into(),
                        &rq.column(1).into(),
                        &rq.column(2).into(),
                    )
                    .unwrap(),
                    ..s.clone()
                }
            })
            .collect(),
        provenance: splats.provenance.clone(),
    };
    let out = render_splat_set(&moved, &g.compose(&target), &k, &RenderSettings::default()).unwrap();
    for (a, b) in out.color.data().iter().zip(base.color.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in out.alpha.data().iter().zip(base.alpha.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn weights_are_bounded() {
    let mut r = rng(9);
    let k = intrinsics(12);
    let splats: Vec<Splat> = (0..40)
        .map(|_| {
            let rot = random_rotation(&mut r, 3.0);
            let q = tco_core::splat::frame_to_quaternion(
                &rot.column(0).into(),
                &rot.column(1).into(),
                &rot.column(2).into(),
            )
            .unwrap();
            Splat {
                center: Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(2.0..4.0)),
                color: [r.random(), r.random(), r.random()],
                opacity: r.random_range(0.0..0.999),
                quaternion: q,
                radii: [r.random_range(0.05..0.5), r.random_range(0.05..0.5)],
            }
        })
        .collect();
    let out = render_splat_set(&set(splats), &Pose::identity(), &k, &RenderSettings::default()).unwrap();
    for &a in out.alpha.data() {
        assert!((0.0..=1.0).contains(&a));
    }
    for (p, &a) in out.alpha.data().iter().enumerate() {
        for ch in 0..3 {
            let c = out.color.data()[p * 3 + ch];
            assert!(c >= 0.0 && c <= a + 1e-12);
        }
    }
}

struct Fixture {
    k: Intrinsics,
    target: Tensor,
    weights: Tensor,
}

fn random_splat_inputs(r: &mut rand_chacha::ChaCha8Rng, m: usize) -> Vec<Tensor> {
    let mut centers = Vec::new();
    let mut tu = Vec::new();
    let mut tv = Vec::new();
    for i in 0..m {
        // distinct depths so the front-to-back order never changes under perturbation
        centers.extend([r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), 2.0 + 0.3 * i as f64 + r.random_range(0.0..0.1)]);
        let rot = random_rotation(r, 0.8);
        tu.extend(rot.column(0).iter());
        tv.extend(rot.column(1).iter());
    }
    vec![
        Tensor::new(vec![m, 3], centers).unwrap(),
        Tensor::new(vec![m, 3], tu).unwrap(),
        Tensor::new(vec![m, 3], tv).unwrap(),
        random_tensor(r, &[m, 2], 0.2, 0.6),
        random_tensor(r, &[m], 0.2, 0.9),
        random_tensor(r, &[m, 3], 0.0, 1.0),
        random_pose(r, 0.15, 0.2).rotation_tensor(),
        random_tensor(r, &[3], -0.2, 0.2),
        random_tensor(r, &[2], 7.0, 9.0),
    ]
}

fn loss<'t>(tape: &'t Tape, x: &[Var<'t>], fx: &Fixture, settings: RenderSettings) -> tco_autodiff::Result<Var<'t>> {
    let splats = DiffSplats {
        centers: x[0],
        tangent_u: x[1],
        tangent_v: x[2],
        radii: x[3],
        opacity: x[4],
        colors: x[5],
        provenance: vec![tco_core::splat::Provenance { view: 0, x: 0, y: 0 }; x[4].shape()[0]],
    };
    let cam = CameraVars {
        rotation: x[6],
        translation: x[7],
        focal: x[8],
        width: fx.k.width,
        height: fx.k.height,
    };
    let out = render(&splats, &cam, &settings).map_err(|e| tco_autodiff::AdError::InvalidShape(e.to_string()))?;
    let photo = out.color.sub(tape.constant(fx.target.clone()))?.abs().mean()?;
    let rest = out.depth.mul(tape.constant(fx.weights.clone()))?.sum();
    let a = out.alpha.square().mean()?;
    Ok(photo.add(rest.scale(0.01))?.add(a)?)
}

#[test]
fn renderer_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng(1000 + seed);
        let m = r.random_range(1..5);
        let inputs = random_splat_inputs(&mut r, m);
        let fixture = Fixture {
            k: Intrinsics::new(8.0, 8.0, 8, 8).unwrap(),
            target: random_tensor(&mut r, &[8, 8, 3], 0.0, 1.0),
            weights: random_tensor(&mut r, &[8, 8], -1.0, 1.0),
        };
        let check = gradcheck::check(|t, x| loss(t, x, &fixture, smooth_settings()), &inputs, 1e-6).unwrap();
        worst = worst.max(check.rel_err);
        assert!(check.passes(1e-3), "seed {seed}: rel err {}", check.rel_err);
    }
    eprintln!("worst renderer rel err {worst:e}");
}

#[test]
fn occluded_splat_gets_no_color_gradient() {
    let k = Intrinsics::new(4.0, 4.0, 4, 4).unwrap();
    let tape = Tape::new();
    let c = tape.leaf(Tensor::new(vec![2, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 3.0]).unwrap());
    let colors = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let splats = DiffSplats {
        centers: c,
        tangent_u: tape.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()),
        tangent_v: tape.constant(Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap()),
        // the front splat is huge and opaque, the back one small
        radii: tape.constant(Tensor::new(vec![2, 2], vec![50.0, 50.0, 0.1, 0.1]).unwrap()),
        opacity: tape.constant(Tensor::new(vec![2], vec![1.0, 0.8]).unwrap()),
        colors,
        provenance: vec![tco_core::splat::Provenance { view: 0, x: 0, y: 0 }; 2],
    };
    let cam = CameraVars::constant(&tape, &Pose::identity(), &k);
    let out = render(&splats, &cam, &RenderSettings::default()).unwrap();
    let g = tape.backward(out.color.sum()).unwrap();
    let gc = g.get(colors);
    assert!(gc.data()[..3].iter().all(|&v| v > 0.0));
    assert!(gc.data()[3..].iter().all(|&v| v == 0.0));
}

#[test]
fn opacity_gradient_sign_for_single_splat() {
    let k = Intrinsics::new(4.0, 4.0, 4, 4).unwrap();
    for (color, target, sign) in [(0.8, 0.05, 1.0f64), (0.8, 0.9, -1.0)] {
        let tape = Tape::new();
        let o = tape.leaf(Tensor::vector(vec![0.5]));
        let splats = DiffSplats {
            centers: tape.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 2.0]).unwrap()),
            tangent_u: tape.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap()),
            tangent_v: tape.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap()),
            radii: tape.constant(Tensor::new(vec![1, 2], vec![0.4, 0.4]).unwrap()),
            opacity: o,
            colors: tape.constant(Tensor::new(vec![1, 3], vec![color; 3]).unwrap()),
            provenance: vec![tco_core::splat::Provenance { view: 0, x: 0, y: 0 }],
        };
        let cam = CameraVars::constant(&tape, &Pose::identity(), &k);
        let out = render(&splats, &cam, &RenderSettings::default()).unwrap();
        // pixel (2, 2) is covered; compare to a flat target there
        let px = out.color.slice(0, 2, 3).unwrap().slice(1, 2, 3).unwrap();
        let l = px.sub(tape.constant(Tensor::full(vec![1, 1, 3], target))).unwrap().abs().sum();
        let g = tape.backward(l).unwrap().get(o).data()[0];
        // rendered color is o·G·c, so raising o moves it toward c
        let rendered = out.color.value().at(&[2, 2, 0]);
        assert_eq!(g.signum(), sign, "color {color} target {target}");
        assert_eq!((rendered - target).signum(), sign);
    }
}
