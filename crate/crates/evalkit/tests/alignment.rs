use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tco_evalkit::{icp_refine, umeyama, EvalError, Sim3};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal))
}

fn random_rotation(r: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = Quaternion::new(r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal));
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn random_sim3(r: &mut ChaCha8Rng) -> Sim3 {
    Sim3 { scale: r.random_range(0.2..5.0), rotation: random_rotation(r), translation: gauss(r) * 3.0 }
}

fn cloud(r: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|_| gauss(r)).collect()
}

/// Horn's closed form: rotation from the dominant eigenvector of the 4x4
/// quaternion matrix, then scale and translation.
fn horn(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Sim3 {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut m = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        m += (a - ms) * (b - md).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let big = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = big.symmetric_eigen();
    let (i, _) = eig.eigenvalues.argmax();
    let v = eig.eigenvectors.column(i);
    let r = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]))
        .to_rotation_matrix()
        .into_inner();
    let num: f64 = src.iter().zip(dst).map(|(a, b)| (b - md).dot(&(r * (a - ms)))).sum();
    let den: f64 = src.iter().map(|a| (a - ms).norm_squared()).sum();
    let s = num / den;
    Sim3 { scale: s, rotation: r, translation: md - r * ms * s }
}

fn close(a: &Sim3, b: &Sim3, tol: f64) -> bool {
    (a.scale - b.scale).abs() < tol
        && (a.rotation - b.rotation).abs().max() < tol
        && (a.translation - b.translation).abs().max() < tol
}

#[test]
fn identity_is_recovered() {
    let p = cloud(&mut rng(1), 20);
    let s = umeyama(&p, &p).unwrap();
    assert!(close(&s, &Sim3::identity(), 1e-10), "{s:?}");
}

#[test]
fn pure_scale_is_recovered() {
    let p = cloud(&mut rng(2), 20);
    let q: Vec<_> = p.iter().map(|v| v * 2.0).collect();
    let s = umeyama(&p, &q).unwrap();
    let expect = Sim3 { scale: 2.0, ..Sim3::identity() };
    assert!(close(&s, &expect, 1e-10), "{s:?}");
}

#[test]
fn generate_and_recover() {
    for seed in 0..50 {
        let mut r = rng(100 + seed);
        let truth = random_sim3(&mut r);
        let p = cloud(&mut r, 30);
        let q = truth.apply_all(&p);
        let s = umeyama(&p, &q).unwrap();
        assert!(close(&s, &truth, 1e-8), "seed {seed}: {s:?} vs {truth:?}");
    }
}

#[test]
fn matches_horn_on_noisy_data() {
    for seed in 0..50 {
        let mut r = rng(200 + seed);
        let truth = random_sim3(&mut r);
        let p = cloud(&mut r, 40);
        let q: Vec<_> = truth.apply_all(&p).into_iter().map(|v| v + gauss(&mut r) * 0.05).collect();
        let a = umeyama(&p, &q).unwrap();
        let b = horn(&p, &q);
        assert!(close(&a, &b, 1e-8), "seed {seed}: {a:?} vs {b:?}");
    }
}

#[test]
fn residual_is_optimal() {
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let truth = random_sim3(&mut r);
        let p = cloud(&mut r, 25);
        let q: Vec<_> = truth.apply_all(&p).into_iter().map(|v| v + gauss(&mut r) * 0.1).collect();
        let s = umeyama(&p, &q).unwrap();
        let best = s.residual(&p, &q);
        assert!(best <= truth.residual(&p, &q) + 1e-9);
        for _ in 0..10 {
            let mut other = s;
            other.scale *= 1.0 + r.random_range(-0.01..0.01);
            other.translation += gauss(&mut r) * 0.01;
            other.rotation = random_small(&mut r) * other.rotation;
            assert!(best <= other.residual(&p, &q) + 1e-12);
        }
    }
}

fn random_small(r: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = nalgebra::Unit::new_normalize(gauss(r));
    nalgebra::Rotation3::from_axis_angle(&axis, 0.01).into_inner()
}

#[test]
fn reflection_is_corrected() {
    let mut r = rng(4);
    let p = cloud(&mut r, 20);
    let q: Vec<_> = p.iter().map(|v| Vector3::new(-v.x, v.y, v.z)).collect();
    let s = umeyama(&p, &q).unwrap();
    assert!((s.rotation.determinant() - 1.0).abs() < 1e-10);
}

#[test]
fn collinear_points_are_rejected() {
    let p: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
    assert!(matches!(umeyama(&p, &p), Err(EvalError::RankDeficient { .. })));
    assert!(matches!(umeyama(&p[..0], &p[..0]), Err(EvalError::Empty(_))));
    assert!(matches!(umeyama(&p[..3], &p[..4]), Err(EvalError::Mismatch { .. })));
}

fn grid(n: usize) -> Vec<Vector3<f64>> {
    // a bumpy sheet: dense, with enough curvature to pin down the rotation
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (i as f64 / n as f64 - 0.5, j as f64 / n as f64 - 0.5);
            out.push(Vector3::new(x, y, 0.3 * (3.0 * x).sin() * (2.0 * y).cos() + 0.2 * x * x));
        }
    }
    out
}

fn rms(s: &Sim3, p: &[Vector3<f64>], q: &[Vector3<f64>]) -> f64 {
    (s.residual(p, q) / p.len() as f64).sqrt()
}

#[test]
fn icp_keeps_an_exact_alignment() {
    let p = grid(20);
    let out = icp_refine(&p, &p, Sim3::identity(), 20, 0.5).unwrap();
    assert!(close(&out.transform, &Sim3::identity(), 1e-8));
}

#[test]
fn icp_recovers_a_small_rigid_perturbation() {
    let q = grid(30);
    let axis = nalgebra::Unit::new_normalize(Vector3::new(0.3, -0.5, 0.8));
    let rot = nalgebra::Rotation3::from_axis_angle(&axis, 2f64.to_radians()).into_inner();
    let centroid = q.iter().sum::<Vector3<f64>>() / q.len() as f64;
    let shift = Vector3::new(0.6, -0.3, 0.74).normalize() * 0.01 * (centroid.norm() + 1.0);
    let p: Vec<_> = q.iter().map(|v| rot * v + shift).collect();
    let init = Sim3::identity();
    let before = rms(&init, &p, &q);
    let out = icp_refine(&p, &q, init, 50, 0.2).unwrap();
    let after = rms(&out.transform, &p, &q);
    assert!(after * 10.0 <= before, "rms {before} -> {after}");
    assert!(out.rms.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.rms);
}

#[test]
fn icp_without_inliers_returns_init() {
    let p = grid(5);
    let q: Vec<_> = p.iter().map(|v| v + Vector3::new(100.0, 0.0, 0.0)).collect();
    let init = Sim3 { scale: 1.5, ..Sim3::identity() };
    let out = icp_refine(&p, &q, init, 10, 0.1).unwrap();
    assert_eq!(out.transform, init);
}
