use tco_autodiff::Tape;
use tco_core::priors::{g_rot, rotation_angle, PriorSet};
use tco_scene::{perturb_priors, synth_scene, Layout, Noise, PriorFile, SynthSpec};

fn priors() -> PriorSet {
    let s = synth_scene(&SynthSpec { layout: Layout::Box, texture_seed: 9, ..SynthSpec::default() }).unwrap();
    s.priors(true, true, true).unwrap()
}

#[test]
fn zero_noise_leaves_priors_unchanged() {
    let p = priors();
    let q = perturb_priors(&p, &Noise::default(), 5).unwrap();
    assert_eq!(p, q);
}

#[test]
fn rotation_noise_is_exact_through_the_prior_penalty() {
    let p = priors();
    let q = perturb_priors(&p, &Noise::new(5.0, 0.0, 0.0).unwrap(), 3).unwrap();
    for (a, b) in p.poses().unwrap().iter().zip(q.poses().unwrap()) {
        let tape = Tape::new();
        let g = g_rot(tape.constant(b.rotation_tensor()), tape.constant(a.rotation_tensor())).unwrap();
        assert!((g.item().unwrap().to_degrees() - 5.0).abs() < 1e-6);
        assert!((rotation_angle(a, b).to_degrees() - 5.0).abs() < 1e-6);
        assert_eq!(a.translation(), b.translation());
    }
}

#[test]
fn translation_and_focal_noise_have_the_requested_size() {
    let p = priors();
    let q = perturb_priors(&p, &Noise::new(0.0, 10.0, 10.0).unwrap(), 8).unwrap();
    for (a, b) in p.poses().unwrap().iter().zip(q.poses().unwrap()) {
        let shift = (b.translation() - a.translation()).norm();
        assert!((shift - 0.1 * a.translation().norm()).abs() < 1e-12);
    }
    for (a, b) in p.intrinsics().unwrap().iter().zip(q.intrinsics().unwrap()) {
        for (x, y) in [(a.fx, b.fx), (a.fy, b.fy)] {
            assert!(((y / x) - 1.1).abs() < 1e-12 || ((y / x) - 0.9).abs() < 1e-12);
        }
        assert_eq!((a.width, a.height), (b.width, b.height));
    }
    assert_eq!(p.depths(), q.depths());
}

#[test]
fn perturbation_is_seeded() {
    let p = priors();
    let n = Noise::new(3.0, 5.0, 5.0).unwrap();
    assert_eq!(perturb_priors(&p, &n, 1).unwrap(), perturb_priors(&p, &n, 1).unwrap());
    assert_ne!(perturb_priors(&p, &n, 1).unwrap(), perturb_priors(&p, &n, 2).unwrap());
}

#[test]
fn negative_noise_is_rejected() {
    assert!(Noise::new(-1.0, 0.0, 0.0).is_err());
    assert!(Noise::new(0.0, f64::NAN, 0.0).is_err());
    assert!(Noise::new(0.0, 0.0, 100.0).is_err());
}

#[test]
fn prior_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("priors.json");
    let p = priors();
    let noise = Noise::new(2.0, 3.0, 4.0).unwrap();
    let q = perturb_priors(&p, &noise, 6).unwrap();
    PriorFile::from_priors(&q, noise, 6).write(&path).unwrap();
    let file = PriorFile::read(&path).unwrap();
    assert_eq!(file.noise, noise);
    let sizes = vec![(32, 32); 6];
    let back = file.apply(p.clone(), &sizes, &path).unwrap();
    assert_eq!(back, q);
}
