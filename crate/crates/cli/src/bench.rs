//! Synthetic benchmark: a pretrained model with a corrupted decoder, adapted
//! per scene, and the ablation suites built on it.

use std::fmt::Write as _;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use tco_core::model::{pretrain, ModelConfig, PretrainConfig, ToyMvt};
use tco_core::optim::LossTrace;
use tco_scene::{perturb_priors, Layout, Noise, Scene, SceneError, SynthSpec};

use crate::error::{CliError, Result};
use crate::pipeline::{run_scene, DecoderNoise, RunConfig, SceneMetrics};

/// Texture seeds of pretraining scenes start here, clear of benchmark seeds.
pub const PRETRAIN_SEED_BASE: u64 = 1_000_000;
const COVERAGE_RETRIES: u64 = 20;

/// A scene for `seed`, cycling through the layouts. Seeds whose cameras
/// miss the geometry are skipped deterministically.
pub fn bench_scene(seed: u64, views: usize, resolution: usize) -> Result<Scene> {
    let layout = Layout::ALL[(seed % 3) as usize];
    let mut last = None;
    for k in 0..COVERAGE_RETRIES {
        let spec = SynthSpec { layout, texture_seed: seed + 1000 * k, n_views: views, resolution, ..SynthSpec::default() };
        match tco_scene::synth_scene(&spec) {
            Err(e @ SceneError::NoCoverage { .. }) => last = Some(e),
            other => return Ok(other?),
        }
    }
    Err(last.expect("at least one attempt").into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of distinct training scenes.
    pub pool: u64,
    pub model: ModelConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self { steps: 6000, lr: 1e-3, seed: 0, pool: 100_000, model: ModelConfig::default() }
    }
}

/// Supervised pretraining on synthetic scenes of 2 to 6 views. Returns the
/// model and its per-step loss.
pub fn pretrain_model(spec: &PretrainSpec) -> Result<(ToyMvt, Vec<f64>)> {
    let mut model = ToyMvt::new(spec.model.clone(), spec.seed)?;
    let res = spec.model.image_size;
    let pool = spec.pool.max(1);
    let max_views = spec.model.max_views.min(6) as u64;
    let cfg = PretrainConfig { steps: spec.steps, lr: spec.lr, seed: spec.seed, ..PretrainConfig::default() };
    let history = pretrain(
        &mut model,
        |draw| {
            let views = 2 + (draw / pool) % (max_views - 1);
            bench_scene(PRETRAIN_SEED_BASE + draw % pool, views as usize, res)
                .and_then(|s| Ok(s.to_sample()?))
                .map_err(|e| tco_core::Error::Config(format!("training scene: {e}")))
        },
        &cfg,
    )?;
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scenes: usize,
    pub views: usize,
    pub resolution: usize,
    pub first_seed: u64,
    /// Decoder corruption; each scene uses its own seed.
    pub noise_strength: f64,
    pub noise_rank: usize,
    pub run: RunConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut run = RunConfig::default();
        run.tco.lr = 1e-2;
        run.tco.lambda1 = 20.0;
        Self { scenes: 10, views: 6, resolution: 32, first_seed: 0, noise_strength: 1.0, noise_rank: 2, run }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub seed: u64,
    pub baseline: SceneMetrics,
    pub refined: SceneMetrics,
    pub trace: LossTrace,
}

impl SceneResult {
    /// Refined over baseline mean accuracy.
    pub fn acc_ratio(&self) -> f64 {
        self.refined.pointmap.acc_mean / self.baseline.pointmap.acc_mean
    }

    pub fn comp_ratio(&self) -> f64 {
        self.refined.pointmap.comp_mean / self.baseline.pointmap.comp_mean
    }
}

/// Run every benchmark scene, with priors perturbed by `prior_noise` when given.
pub fn run_benchmark(model: &ToyMvt, bench: &BenchConfig, prior_noise: Option<&Noise>) -> Result<Vec<SceneResult>> {
    let mut out = Vec::with_capacity(bench.scenes);
    for i in 0..bench.scenes as u64 {
        let seed = bench.first_seed + i;
        let scene = bench_scene(seed, bench.views, bench.resolution)?;
        let p = bench.run.tco.priors;
        let mut priors = scene.priors(p.pose, p.intrinsics, p.depth)?;
        if let Some(n) = prior_noise {
            priors = perturb_priors(&priors, n, seed)?;
        }
        let mut run = bench.run.clone();
        run.tco.seed = seed;
        run.decoder_noise =
            (bench.noise_strength > 0.0).then_some(DecoderNoise { strength: bench.noise_strength, rank: bench.noise_rank, seed });
        let r = run_scene(model, &scene, &priors, &run)?;
        info!(
            "scene {seed}: acc {:.4} -> {:.4}, comp {:.4} -> {:.4}, ate {:.4} -> {:.4}",
            r.baseline.pointmap.acc_mean,
            r.refined.pointmap.acc_mean,
            r.baseline.pointmap.comp_mean,
            r.refined.pointmap.comp_mean,
            r.baseline.trajectory.ate,
            r.refined.trajectory.ate
        );
        out.push(SceneResult { seed, baseline: r.baseline, refined: r.refined, trace: r.tco.trace });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    RadiusScale,
    LoraRank,
    FinetuneHeads,
    Noise,
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radius_scale" => Ok(Suite::RadiusScale),
            "lora_rank" => Ok(Suite::LoraRank),
            "finetune_heads" => Ok(Suite::FinetuneHeads),
            "noise" => Ok(Suite::Noise),
            _ => Err(CliError::Usage(format!(
                "unknown suite {s:?}; expected radius_scale, lora_rank, finetune_heads or noise"
            ))),
        }
    }
}

pub const RADIUS_SCALES: [f64; 3] = [0.05, 0.5, 5.0];
pub const LORA_RANKS: [usize; 3] = [1, 4, 16];
/// Rotation (degrees), translation and focal (percent) prior noise.
pub const NOISE_TIERS: [(f64, f64, f64); 4] = [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (3.0, 5.0, 5.0), (5.0, 10.0, 10.0)];

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub bench: BenchConfig,
    pub prior_noise: Option<Noise>,
}

pub fn variants(suite: Suite, base: &BenchConfig) -> Vec<Variant> {
    let with = |label: String, f: &dyn Fn(&mut BenchConfig)| {
        let mut bench = base.clone();
        f(&mut bench);
        Variant { label, bench, prior_noise: None }
    };
    match suite {
        Suite::RadiusScale => RADIUS_SCALES
            .iter()
            .map(|&a| with(format!("radius_scale={a}"), &|b| b.run.tco.radius_scale = a))
            .collect(),
        Suite::LoraRank => LORA_RANKS
            .iter()
            .map(|&r| with(format!("lora_rank={r}"), &|b| b.run.lora_rank = Some(r)))
            .collect(),
        Suite::FinetuneHeads => [("decoder", false, false), ("+camera", false, true), ("+depth", true, false), ("+camera+depth", true, true)]
            .iter()
            .map(|&(label, depth, camera)| {
                with(label.to_string(), &|b| b.run.tco.trainable = b.run.tco.trainable.with_heads(depth, camera))
            })
            .collect(),
        Suite::Noise => NOISE_TIERS
            .iter()
            .map(|&(r, t, f)| Variant {
                label: format!("noise=({r}deg,{t}%,{f}%)"),
                bench: base.clone(),
                prior_noise: Some(Noise { rot_deg: r, trans_pct: t, focal_pct: f }),
            })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub acc: f64,
    pub comp: f64,
    pub nc: f64,
    pub ate: f64,
}

impl MeanMetrics {
    pub fn of<'a>(metrics: impl IntoIterator<Item = &'a SceneMetrics>) -> Self {
        let mut m = Self::default();
        let mut n = 0.0;
        for s in metrics {
            m.acc += s.pointmap.acc_mean;
            m.comp += s.pointmap.comp_mean;
            m.nc += s.pointmap.nc_mean;
            m.ate += s.trajectory.ate;
            n += 1.0;
        }
        if n > 0.0 {
            for v in [&mut m.acc, &mut m.comp, &mut m.nc, &mut m.ate] {
                *v /= n;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub baseline: MeanMetrics,
    pub refined: MeanMetrics,
    pub scenes: Vec<SceneResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub version: String,
    pub bench: BenchConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | Acc | Comp | N.C. | ATE | Acc (step 0) |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.refined;
            let _ = writeln!(s, "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |", r.label, m.acc, m.comp, m.nc, m.ate, r.baseline.acc);
        }
        s
    }
}

pub fn ablate(model: &ToyMvt, suite: Suite, base: &BenchConfig) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for v in variants(suite, base) {
        info!("ablation {suite:?}: {}", v.label);
        let scenes = run_benchmark(model, &v.bench, v.prior_noise.as_ref())?;
        rows.push(AblationRow {
            label: v.label,
            baseline: MeanMetrics::of(scenes.iter().map(|s| &s.baseline)),
            refined: MeanMetrics::of(scenes.iter().map(|s| &s.refined)),
            scenes,
        });
    }
    Ok(AblationTable { suite, version: crate::report::TOOL_VERSION.to_string(), bench: base.clone(), rows })
}
