//! One scene through the model: priors, adaptation and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tco_core::model::ToyMvt;
use tco_core::optim::{run_tco, EnabledPriors, TcoConfig, TcoOutput};
use tco_core::predictions::Predictions;
use tco_core::priors::PriorSet;
use tco_evalkit::{evaluate_pointmaps, trajectory_metrics, EvalConfig, PointmapMetrics, TrajectoryMetrics, ViewGeometry};
use tco_scene::{GroundTruth, PriorFile, Scene};

use crate::error::{CliError, Result};

/// Seeded low-rank corruption of the decoder, applied before adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderNoise {
    pub strength: f64,
    pub rank: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tco: TcoConfig,
    /// Adapter rank; the checkpoint's own rank when absent.
    pub lora_rank: Option<usize>,
    pub decoder_noise: Option<DecoderNoise>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { tco: TcoConfig::default(), lora_rank: None, decoder_noise: None, eval: EvalConfig::default() }
    }
}

/// The model a run adapts: the checkpoint with the configured decoder noise
/// and adapter rank.
pub fn prepare_model(base: &ToyMvt, cfg: &RunConfig) -> Result<ToyMvt> {
    let mut model = base.clone();
    if let Some(n) = cfg.decoder_noise {
        model.perturb_decoder(n.strength, n.rank, n.seed);
    }
    if let Some(r) = cfg.lora_rank {
        model = model.with_lora_rank(r, cfg.tco.seed)?;
    }
    Ok(model)
}

/// The scene's priors, optionally overlaid with a perturbed prior file,
/// restricted to the enabled kinds.
pub fn scene_priors(scene: &Scene, enabled: EnabledPriors, prior_file: Option<&Path>) -> Result<PriorSet> {
    let mut priors = scene.priors(true, true, true)?;
    if let Some(path) = prior_file {
        let sizes: Vec<(usize, usize)> = scene.images.iter().map(|im| (im.shape()[1], im.shape()[0])).collect();
        priors = PriorFile::read(path)?.apply(priors, &sizes, path)?;
    }
    if enabled.pose && priors.poses().is_none() {
        return Err(CliError::MissingPrior("pose"));
    }
    if enabled.intrinsics && priors.intrinsics().is_none() {
        return Err(CliError::MissingPrior("intrinsics"));
    }
    if enabled.depth && priors.depths().is_none() {
        return Err(CliError::MissingPrior("depth"));
    }
    if !enabled.pose {
        priors = priors.without_poses();
    }
    if !enabled.intrinsics {
        priors = priors.without_intrinsics();
    }
    if !enabled.depth {
        priors = priors.without_depths();
    }
    Ok(priors)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub pointmap: PointmapMetrics,
    pub trajectory: TrajectoryMetrics,
    pub icp_inlier_dist: f64,
    pub icp_iterations: usize,
}

impl SceneMetrics {
    pub fn values(&self) -> [(&'static str, f64); 11] {
        let (p, t) = (&self.pointmap, &self.trajectory);
        [
            ("acc_mean", p.acc_mean),
            ("acc_median", p.acc_median),
            ("comp_mean", p.comp_mean),
            ("comp_median", p.comp_median),
            ("nc_mean", p.nc_mean),
            ("nc_median", p.nc_median),
            ("ate", t.ate),
            ("rpe_trans", t.rpe_trans),
            ("rpe_rot", t.rpe_rot),
            ("icp_inlier_dist", self.icp_inlier_dist),
            ("icp_iterations", self.icp_iterations as f64),
        ]
    }
}

pub fn geometry_of(preds: &Predictions) -> GroundTruth {
    GroundTruth {
        depths: preds.views.iter().map(|v| v.depth.clone()).collect(),
        poses: preds.poses(),
        intrinsics: preds.views.iter().map(|v| v.intrinsics).collect(),
    }
}

pub fn evaluate(pred: &GroundTruth, gt: &GroundTruth, cfg: &EvalConfig) -> Result<SceneMetrics> {
    let views = |g: &GroundTruth| -> Result<Vec<ViewGeometry>> {
        (0..g.depths.len())
            .map(|i| Ok(ViewGeometry::new(&g.depths[i], &g.poses[i], &g.intrinsics[i])?))
            .collect()
    };
    let e = evaluate_pointmaps(&views(pred)?, &views(gt)?, cfg)?;
    let trajectory = trajectory_metrics(&pred.poses, &gt.poses)?;
    Ok(SceneMetrics {
        pointmap: e.metrics,
        trajectory,
        icp_inlier_dist: e.inlier_dist,
        icp_iterations: e.icp_rms.len().saturating_sub(1),
    })
}

pub struct RunOutcome {
    pub baseline: SceneMetrics,
    pub refined: SceneMetrics,
    pub tco: TcoOutput,
}

/// Adapt `base` (after [`prepare_model`]) to the scene and evaluate the
/// predictions before and after.
pub fn run_scene(base: &ToyMvt, scene: &Scene, priors: &PriorSet, cfg: &RunConfig) -> Result<RunOutcome> {
    let gt = scene.gt.as_ref().ok_or_else(|| CliError::NoGroundTruth("<in memory>".into()))?;
    let model = prepare_model(base, cfg)?;
    let tco = run_tco(&model, &scene.images, priors, &cfg.tco)?;
    let baseline = evaluate(&geometry_of(&tco.baseline), gt, &cfg.eval)?;
    let refined = evaluate(&geometry_of(&tco.refined), gt, &cfg.eval)?;
    Ok(RunOutcome { baseline, refined, tco })
}
