mod common;

use common::*;
use proptest::prelude::*;
use tco_autodiff::{Tape, Tensor};
use tco_core::model::{role_of, ModelConfig, ParamRole, ToyMvt, Trainable};

fn small() -> ModelConfig {
    ModelConfig { image_size: 16, patch: 8, dim: 16, heads: 2, ..ModelConfig::default() }
}

fn images(seed: u64, n: usize, size: usize) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| random_tensor(&mut r, &[size, size, 3], 0.0, 1.0)).collect()
}

fn bits(m: &ToyMvt, imgs: &[Tensor]) -> Vec<u64> {
    let p = m.predict(imgs).unwrap();
    p.views
        .iter()
        .flat_map(|v| {
            let mut out = v.depth.values().data().to_vec();
            out.extend(v.confidence.values().data());
            out.extend(v.pose.rotation_tensor().data());
            out.extend(v.pose.translation_tensor().data());
            out.extend(v.intrinsics.focal_tensor().data());
            out
        })
        .map(f64::to_bits)
        .collect()
}

#[test]
fn adapters_cover_attention_and_feed_forward_maps() {
    let m = ToyMvt::new(ModelConfig::default(), 0).unwrap();
    let lora = m.trainable_parameters(&Trainable::lora_only());
    assert_eq!(lora.len(), 24);
    assert_eq!(m.adapted_maps().len(), 12);
    for map in m.adapted_maps() {
        let w = m.param(&format!("dec.{map}.w")).unwrap().shape().to_vec();
        assert_eq!(m.param(&format!("lora.{map}.a")).unwrap().shape(), [w[0], 4]);
        let b = m.param(&format!("lora.{map}.b")).unwrap();
        assert_eq!(b.shape(), [4, w[1]]);
        assert!(b.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn predictions_have_the_declared_shapes() {
    let m = ToyMvt::new(small(), 3).unwrap();
    let p = m.predict(&images(1, 3, 16)).unwrap();
    assert_eq!(p.len(), 3);
    for v in &p.views {
        assert_eq!(v.depth.values().shape(), [16, 16]);
        assert!(v.depth.values().data().iter().all(|&d| d > 0.0));
        assert!(v.confidence.values().data().iter().all(|&c| c > 1.0));
        assert_eq!((v.intrinsics.width, v.intrinsics.height), (16, 16));
        assert!(v.intrinsics.fx > 0.0 && v.intrinsics.fy > 0.0);
    }
    assert_eq!(p.views[0].pose.rotation(), &nalgebra::Matrix3::identity());
    assert_eq!(p.views[0].pose.translation(), &nalgebra::Vector3::zeros());
}

#[test]
fn zero_adapters_match_the_base_network_bitwise() {
    let mut m = ToyMvt::new(small(), 5).unwrap();
    m.perturb_decoder(0.5, 2, 9);
    let imgs = images(2, 4, 16);
    let base = bits(&m.without_adapters(), &imgs);
    for seed in 0..3 {
        m.reset_lora(seed);
        assert_eq!(bits(&m, &imgs), base);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let m = ToyMvt::new(small(), 0).unwrap();
    assert!(m.predict(&images(0, 1, 16)).is_err());
    assert!(m.predict(&images(0, 9, 16)).is_err());
    assert!(m.predict(&images(0, 2, 8)).is_err());
    assert!(ToyMvt::new(ModelConfig { lora_rank: 0, ..small() }, 0).is_err());
    assert!(ToyMvt::new(ModelConfig { dim: 15, ..small() }, 0).is_err());
}

#[test]
fn checkpoints_round_trip_exactly() {
    let mut m = ToyMvt::new(small(), 7).unwrap();
    m.perturb_decoder(0.3, 1, 1);
    let mut buf = Vec::new();
    m.write_to(&mut buf).unwrap();
    let back = ToyMvt::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params(), m.params());
    buf[0] = b'X';
    assert!(ToyMvt::read_from(&mut buf.as_slice()).is_err());
}

#[test]
fn decoder_noise_has_the_requested_relative_norm() {
    let m = ToyMvt::new(small(), 0).unwrap();
    let mut p = m.clone();
    p.perturb_decoder(0.7, 2, 4);
    for map in m.adapted_maps() {
        let name = format!("dec.{map}.w");
        let (a, b) = (m.param(&name).unwrap(), p.param(&name).unwrap());
        let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let n: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((d / n - 0.7).abs() < 1e-12);
    }
    let untouched = Trainable { decoder: true, ..Trainable::none() };
    assert_ne!(m.frozen_hash(&Trainable::none()), p.frozen_hash(&Trainable::none()));
    assert_eq!(m.frozen_hash(&untouched), p.frozen_hash(&untouched));
}

#[test]
fn rank_changes_reinitialize_adapters() {
    let m = ToyMvt::new(small(), 0).unwrap().with_lora_rank(7, 3).unwrap();
    assert_eq!(m.config().lora_rank, 7);
    for map in m.adapted_maps() {
        assert_eq!(m.param(&format!("lora.{map}.a")).unwrap().shape()[1], 7);
        assert_eq!(m.param(&format!("lora.{map}.b")).unwrap().shape()[0], 7);
    }
}

#[test]
fn trainable_sets_select_roles() {
    let m = ToyMvt::new(small(), 0).unwrap();
    let with_heads = Trainable::lora_only().with_heads(true, true);
    for k in m.trainable_parameters(&with_heads) {
        assert!(matches!(role_of(&k), ParamRole::Lora | ParamRole::DepthHead | ParamRole::CameraHead));
    }
    assert!(m.trainable_parameters(&Trainable::none()).is_empty());
    assert_eq!(m.trainable_parameters(&Trainable::base()).len() + 24, m.params().len());
}

#[test]
fn forward_exposes_exactly_the_trainable_leaves() {
    let m = ToyMvt::new(small(), 0).unwrap();
    let tape = Tape::new();
    let t = Trainable::lora_only().with_heads(false, true);
    let fwd = m.forward(&tape, &images(0, 2, 16), &t).unwrap();
    let names: Vec<String> = fwd.leaves.iter().map(|(k, _)| k.clone()).collect();
    assert_eq!(names, m.trainable_parameters(&t));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prediction_is_deterministic(seed in any::<u64>(), n in 2usize..5) {
        let m = ToyMvt::new(small(), seed).unwrap();
        let imgs = images(seed, n, 16);
        prop_assert_eq!(bits(&m, &imgs), bits(&m.clone(), &imgs));
    }
}
