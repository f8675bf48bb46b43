mod common;

use common::*;
use nalgebra::Vector3;
use proptest::prelude::*;
use tco_autodiff::Tensor;
use tco_core::geometry::DepthMap;
use tco_core::model::{ModelConfig, ToyMvt, Trainable};
use tco_core::optim::{adam_step, run_tco, Adam, AdamState, EnabledPriors, LossTrace, Task, TcoConfig};
use tco_core::priors::PriorSet;
use tco_core::Error;

fn small() -> ModelConfig {
    ModelConfig { image_size: 16, patch: 8, dim: 16, heads: 2, ..ModelConfig::default() }
}

struct Fixture {
    model: ToyMvt,
    images: Vec<Tensor>,
    priors: PriorSet,
}

fn fixture() -> Fixture {
    let k = intrinsics(16);
    let poses = arc_poses(3, 4.0, 30.0, Vector3::new(0.0, 0.0, 4.0));
    let plane = Plane::new(Vector3::new(0.0, 0.0, 4.0), Vector3::new(0.1, 0.2, 1.0));
    let mut images = Vec::new();
    let mut depths = Vec::new();
    for p in &poses {
        let (img, d) = render_plane(&plane, p, &k, 2.0);
        images.push(img);
        depths.push(DepthMap::dense(d).unwrap());
    }
    let mut model = ToyMvt::new(small(), 11).unwrap();
    model.perturb_decoder(0.5, 2, 1);
    let priors = PriorSet::new(3, Some(poses), Some(vec![k; 3]), Some(depths)).unwrap();
    Fixture { model, images, priors }
}

fn reference(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64) {
    for i in 0..p.len() {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        let mh = m[i] / (1.0 - 0.9f64.powi(t));
        let vh = v[i] / (1.0 - 0.999f64.powi(t));
        p[i] -= lr * mh / (vh.sqrt() + 1e-8);
    }
}

#[test]
fn adam_matches_the_reference_update() {
    let mut r = rng(0);
    let mut params = vec![random_tensor(&mut r, &[4, 3], -1.0, 1.0)];
    let mut flat = params[0].data().to_vec();
    let (mut m, mut v) = (vec![0.0; 12], vec![0.0; 12]);
    let mut opt = Adam::new(3e-3);
    for t in 1..=200 {
        let g = random_tensor(&mut r, &[4, 3], -5.0, 5.0);
        opt.step(&mut params, std::slice::from_ref(&g)).unwrap();
        reference(&mut flat, &mut m, &mut v, g.data(), t, 3e-3);
    }
    for (a, b) in params[0].data().iter().zip(&flat) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn first_adam_step_moves_each_coordinate_by_the_learning_rate() {
    let mut params = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
    let grads = vec![Tensor::vector(vec![3.0, -0.01, 200.0])];
    let mut s = AdamState::default();
    adam_step(&mut params, &grads, &mut s, 0.1).unwrap();
    for (p, g) in params[0].data().iter().zip(grads[0].data()) {
        assert!((p + 0.1 * g.signum()).abs() < 1e-6);
    }
}

#[test]
fn adam_rejects_non_finite_and_mismatched_gradients() {
    let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
    let mut s = AdamState::default();
    let bad = vec![Tensor::vector(vec![f64::NAN, 0.0])];
    assert!(matches!(adam_step(&mut params, &bad, &mut s, 0.1), Err(Error::NonFinite { .. })));
    assert!(adam_step(&mut params, &[Tensor::vector(vec![1.0])], &mut s, 0.1).is_err());
    assert_eq!(params[0].data(), &[0.0, 0.0]);
}

#[test]
fn zero_steps_return_the_baseline() {
    let f = fixture();
    let out = run_tco(&f.model, &f.images, &f.priors, &TcoConfig { steps: 0, ..TcoConfig::default() }).unwrap();
    assert_eq!(out.refined, out.baseline);
    assert!(out.trace.is_empty());
}

#[test]
fn adaptation_touches_only_trainable_parameters() {
    let f = fixture();
    for trainable in [Trainable::lora_only(), Trainable::lora_only().with_heads(true, true)] {
        let cfg = TcoConfig { steps: 3, lr: 1e-2, trainable, ..TcoConfig::default() };
        let out = run_tco(&f.model, &f.images, &f.priors, &cfg).unwrap();
        assert_eq!(out.model.frozen_hash(&trainable), f.model.frozen_hash(&trainable));
        assert_ne!(out.model.frozen_hash(&Trainable::none()), f.model.frozen_hash(&Trainable::none()));
        assert_ne!(out.refined, out.baseline);
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let f = fixture();
    let cfg = TcoConfig { steps: 4, lr: 1e-2, seed: 9, ..TcoConfig::default() };
    let a = run_tco(&f.model, &f.images, &f.priors, &cfg).unwrap();
    let b = run_tco(&f.model, &f.images, &f.priors, &cfg).unwrap();
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    assert_eq!(a.refined, b.refined);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn priors_pull_the_objective_down() {
    let f = fixture();
    let cfg = TcoConfig { steps: 30, lr: 5e-3, lambda1: 0.0, ..TcoConfig::default() };
    let out = run_tco(&f.model, &f.images, &f.priors, &cfg).unwrap();
    let t = out.trace.totals();
    assert!(t[t.len() - 1] < 0.8 * t[0], "{} -> {}", t[0], t[t.len() - 1]);
    for e in &out.trace.entries {
        assert_eq!(e.components.compat, 0.0);
        assert!((e.components.sum() - e.total).abs() < 1e-12);
    }
}

#[test]
fn pose_task_uses_depth_priors() {
    let f = fixture();
    let cfg = TcoConfig { steps: 2, ..TcoConfig::pose_task() };
    assert_eq!(cfg.task, Task::Pose);
    let out = run_tco(&f.model, &f.images, &f.priors, &cfg).unwrap();
    assert!(out.trace.entries.iter().all(|e| e.components.depth > 0.0 && e.components.rot == 0.0));
    let no_depth = f.priors.clone().without_depths();
    assert!(matches!(run_tco(&f.model, &f.images, &no_depth, &cfg), Err(Error::MissingPrior(_))));
}

#[test]
fn empty_objectives_are_rejected() {
    let none = EnabledPriors::default();
    let cfg = TcoConfig { lambda1: 0.0, priors: none, ..TcoConfig::default() };
    assert!(matches!(cfg.validate(), Err(Error::EmptyObjective)));
    assert!(TcoConfig { lr: -1.0, ..TcoConfig::default() }.validate().is_err());
    assert!(TcoConfig::default().validate().is_ok());
}

#[test]
fn traces_round_trip_through_jsonl() {
    let f = fixture();
    let cfg = TcoConfig { steps: 3, lr: 1e-2, ..TcoConfig::default() };
    let out = run_tco(&f.model, &f.images, &f.priors, &cfg).unwrap();
    let dir = std::env::temp_dir().join(format!("tco-trace-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("trace.jsonl");
    out.trace.write_jsonl(&path).unwrap();
    assert_eq!(LossTrace::read_jsonl(&path).unwrap(), out.trace);
    std::fs::remove_dir_all(&dir).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_gradients_move_by_the_learning_rate(seed in any::<u64>(), lr in 1e-5..1.0f64) {
        let mut r = rng(seed);
        let mut p = vec![random_tensor(&mut r, &[5], -1.0, 1.0)];
        let signs = random_tensor(&mut r, &[5], -1.0, 1.0);
        let g = vec![random_tensor(&mut r, &[5], 0.1, 10.0).zip_map(&signs, |v, s| v * s.signum()).unwrap()];
        let mut s = AdamState::default();
        for _ in 0..10 {
            let before = p[0].clone();
            adam_step(&mut p, &g, &mut s, lr).unwrap();
            for ((a, b), gi) in p[0].data().iter().zip(before.data()).zip(g[0].data()) {
                prop_assert!((a - b + lr * gi.signum()).abs() <= 1e-6 * lr);
            }
        }
    }
}
