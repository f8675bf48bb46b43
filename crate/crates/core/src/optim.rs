//! Test-time optimization: penalized objectives, Adam and the adaptation loop.

use std::io::Write;
use std::path::Path;

use log::error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tco_autodiff::{Tape, Tensor, Var};

use crate::compat::{geometric_loss, photometric_loss, sample_split, CompatSettings, ViewSplit};
use crate::error::{Error, Result};
use crate::model::{ToyMvt, Trainable};
use crate::predictions::{PredictionVars, Predictions};
use crate::priors::{g_depth, g_k, g_rot, g_trans, global_depth_align, scene_scale, PriorSet};
use crate::render::RenderSettings;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update. Moments are created lazily on the first call.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                component: format!("gradient of parameter {i}"),
                step: state.step as usize,
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape("Adam state does not match the parameter list".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = state.beta1 * md[j] + (1.0 - state.beta1) * gj;
            vd[j] = state.beta2 * vd[j] + (1.0 - state.beta2) * gj * gj;
            let mh = md[j] / c1;
            let vh = vd[j] / c2;
            pd[j] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Adam with a fixed learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, state: AdamState::default() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        adam_step(params, grads, &mut self.state, self.lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Poses and/or intrinsics are known; refine point maps.
    Pointmap,
    /// Depths are known; refine poses.
    Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EnabledPriors {
    pub pose: bool,
    pub intrinsics: bool,
    pub depth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcoConfig {
    pub task: Task,
    pub steps: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub priors: EnabledPriors,
    pub radius_scale: f64,
    pub seed: u64,
    pub alpha_min: f64,
    pub mask_unrendered: bool,
    /// Keep the depth alignment `(s, t)` off the gradient path.
    pub detach_alignment: bool,
    pub trainable: Trainable,
}

impl Default for TcoConfig {
    fn default() -> Self {
        Self {
            task: Task::Pointmap,
            steps: 40,
            lr: 5e-4,
            lambda1: 0.2,
            mu1: 1.0,
            mu2: 2.0,
            mu3: 0.01,
            priors: EnabledPriors { pose: true, intrinsics: true, depth: false },
            radius_scale: 0.5,
            seed: 0,
            alpha_min: 0.2,
            mask_unrendered: true,
            detach_alignment: true,
            trainable: Trainable::lora_only(),
        }
    }
}

impl TcoConfig {
    pub fn pose_task() -> Self {
        Self {
            task: Task::Pose,
            lr: 2e-4,
            lambda1: 1.0,
            mu1: 1.0,
            priors: EnabledPriors { pose: false, intrinsics: false, depth: true },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lr, self.lambda1, self.mu1, self.mu2, self.mu3, self.radius_scale];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("learning rate, weights and radius scale must be nonnegative".into()));
        }
        let any_prior_term = match self.task {
            Task::Pointmap => {
                (self.priors.pose && (self.mu1 > 0.0 || self.mu2 > 0.0)) || (self.priors.intrinsics && self.mu3 > 0.0)
            }
            Task::Pose => self.priors.depth && self.mu1 > 0.0,
        };
        if self.lambda1 == 0.0 && !any_prior_term {
            return Err(Error::EmptyObjective);
        }
        Ok(())
    }

    pub fn compat_settings(&self) -> CompatSettings {
        CompatSettings {
            radius_scale: self.radius_scale,
            alpha_min: self.alpha_min,
            mask_unrendered: self.mask_unrendered,
            render: RenderSettings::default(),
        }
    }
}

/// Weighted loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub compat: f64,
    pub rot: f64,
    pub trans: f64,
    pub k: f64,
    pub depth: f64,
}

impl Components {
    pub fn sum(&self) -> f64 {
        self.compat + self.rot + self.trans + self.k + self.depth
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("compat", self.compat),
            ("rot", self.rot),
            ("trans", self.trans),
            ("k", self.k),
            ("depth", self.depth),
        ]
    }
}

pub struct Objective<'t> {
    pub total: Var<'t>,
    pub components: Components,
}

struct Accum<'t> {
    total: Option<Var<'t>>,
    components: Components,
}

impl<'t> Accum<'t> {
    fn add(&mut self, term: Var<'t>, weight: f64, slot: fn(&mut Components) -> &mut f64) -> Result<()> {
        let w = term.scale(weight);
        *slot(&mut self.components) += w.item()?;
        self.total = Some(match self.total {
            Some(t) => t.add(w)?,
            None => w,
        });
        Ok(())
    }

    fn finish(self) -> Result<Objective<'t>> {
        let total = self.total.ok_or(Error::EmptyObjective)?;
        Ok(Objective { total, components: self.components })
    }
}

/// `λ₁ L_photo + μ₁ Σ g_rot + μ₂ Σ g_trans + μ₃ Σ g_K`; terms whose prior is
/// missing, disabled or zero-weighted are dropped.
pub fn compose_loss_task1<'t>(
    preds: &PredictionVars<'t>,
    images: &[Tensor],
    priors: &PriorSet,
    split: &ViewSplit,
    cfg: &TcoConfig,
) -> Result<Objective<'t>> {
    let tape = preds.views[0].depth.tape();
    let mut acc = Accum { total: None, components: Components::default() };
    if cfg.lambda1 > 0.0 {
        let photo = photometric_loss(preds, images, split, &cfg.compat_settings())?;
        acc.add(photo, cfg.lambda1, |c| &mut c.compat)?;
    }
    if let Some(poses) = priors.poses().filter(|_| cfg.priors.pose) {
        check_len(poses.len(), preds.len())?;
        if cfg.mu1 > 0.0 {
            let mut sum = tape.scalar(0.0);
            for (v, p) in preds.views.iter().zip(poses) {
                sum = sum.add(g_rot(v.camera.rotation, tape.constant(p.rotation_tensor()))?)?;
            }
            acc.add(sum, cfg.mu1, |c| &mut c.rot)?;
        }
        if cfg.mu2 > 0.0 {
            let pred_t: Vec<Var<'t>> = preds.views.iter().map(|v| v.camera.translation).collect();
            let prior_t: Vec<Var<'t>> = poses.iter().map(|p| tape.constant(p.translation_tensor())).collect();
            let s = scene_scale(&pred_t)?;
            let s_hat = scene_scale(&prior_t)?;
            let mut sum = tape.scalar(0.0);
            for (t, th) in pred_t.iter().zip(&prior_t) {
                sum = sum.add(g_trans(*t, *th, s, s_hat)?)?;
            }
            acc.add(sum, cfg.mu2, |c| &mut c.trans)?;
        }
    }
    if let Some(ks) = priors.intrinsics().filter(|_| cfg.priors.intrinsics && cfg.mu3 > 0.0) {
        check_len(ks.len(), preds.len())?;
        let mut sum = tape.scalar(0.0);
        for (v, k) in preds.views.iter().zip(ks) {
            sum = sum.add(g_k(v.camera.focal, k)?)?;
        }
        acc.add(sum, cfg.mu3, |c| &mut c.k)?;
    }
    acc.finish()
}

/// `λ₁ L_geom + μ₁ Σ g_depth` with one scale/shift fitted over all views.
pub fn compose_loss_task2<'t>(
    preds: &PredictionVars<'t>,
    images: &[Tensor],
    priors: &PriorSet,
    split: &ViewSplit,
    cfg: &TcoConfig,
) -> Result<Objective<'t>> {
    let depths = priors.depths().ok_or(Error::MissingPrior("depth"))?;
    check_len(depths.len(), preds.len())?;
    let mut acc = Accum { total: None, components: Components::default() };
    if cfg.lambda1 > 0.0 {
        let geom = geometric_loss(preds, images, split, &cfg.compat_settings())?;
        acc.add(geom, cfg.lambda1, |c| &mut c.compat)?;
    }
    if cfg.mu1 > 0.0 && cfg.priors.depth {
        let pred: Vec<Var<'t>> = preds.views.iter().map(|v| v.depth).collect();
        let (mut s, mut t) = global_depth_align(&pred, depths)?;
        if cfg.detach_alignment {
            s = s.detach();
            t = t.detach();
        }
        let tape = pred[0].tape();
        let mut sum = tape.scalar(0.0);
        for (d, p) in pred.iter().zip(depths) {
            sum = sum.add(g_depth(*d, p, s, t)?)?;
        }
        acc.add(sum, cfg.mu1, |c| &mut c.depth)?;
    }
    acc.finish()
}

fn check_len(prior: usize, views: usize) -> Result<()> {
    if prior != views {
        return Err(Error::Shape(format!("prior covers {prior} views, predictions have {views}")));
    }
    Ok(())
}

pub fn compose_loss<'t>(
    preds: &PredictionVars<'t>,
    images: &[Tensor],
    priors: &PriorSet,
    split: &ViewSplit,
    cfg: &TcoConfig,
) -> Result<Objective<'t>> {
    match cfg.task {
        Task::Pointmap => compose_loss_task1(preds, images, priors, split, cfg),
        Task::Pose => compose_loss_task2(preds, images, priors, split, cfg),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub source: usize,
    pub total: f64,
    #[serde(flatten)]
    pub components: Components,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.total).collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("trace entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("trace line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

pub struct TcoOutput {
    /// Predictions of the unadapted model.
    pub baseline: Predictions,
    /// Predictions after the last update, from a fresh forward pass.
    pub refined: Predictions,
    pub trace: LossTrace,
    /// The model with its adapted parameters.
    pub model: ToyMvt,
}

/// Adapt a copy of `model` to one scene. Adapters are re-initialized from
/// `cfg.seed` so every scene starts from the base model.
pub fn run_tco(model: &ToyMvt, images: &[Tensor], priors: &PriorSet, cfg: &TcoConfig) -> Result<TcoOutput> {
    cfg.validate()?;
    let mut model = model.clone();
    model.reset_lora(cfg.seed);
    let baseline = model.predict(images)?;
    let names = model.trainable_parameters(&cfg.trainable);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let fwd = model.forward(&tape, images, &cfg.trainable)?;
        let split = sample_split(images.len(), &mut rng)?;
        let obj = compose_loss(&fwd.predictions, images, priors, &split, cfg)?;
        let total = obj.total.item()?;
        let entry = TraceEntry { step, source: split.source[0], total, components: obj.components };
        if !total.is_finite() {
            let component = obj
                .components
                .named()
                .iter()
                .find(|(_, v)| !v.is_finite())
                .map_or("total", |(n, _)| *n)
                .to_string();
            error!("non-finite loss at step {step}; trace so far:\n{}{}", trace.to_jsonl(), serde_json::to_string(&entry).unwrap_or_default());
            return Err(Error::NonFinite { component, step });
        }
        trace.entries.push(entry);
        let grads = tape.backward(obj.total)?;
        let g: Vec<Tensor> = fwd.leaves.iter().map(|(_, v)| grads.get(*v)).collect();
        let mut params: Vec<Tensor> = names.iter().map(|k| model.param(k).expect("trainable").clone()).collect();
        adam_step(&mut params, &g, &mut state, cfg.lr).map_err(|e| match e {
            Error::NonFinite { .. } => {
                error!("non-finite gradient at step {step}; components {:?}", obj.components);
                Error::NonFinite { component: "gradient".into(), step }
            }
            e => e,
        })?;
        for (k, p) in names.iter().zip(params) {
            model.set_param(k, p)?;
        }
    }
    let refined = model.predict(images)?;
    Ok(TcoOutput { baseline, refined, trace, model })
}
