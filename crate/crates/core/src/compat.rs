//! Cross-view compatibility: render one view's splats into the others and
//! compare against their images or predicted depths.

use log::warn;
use rand::Rng;
use tco_autodiff::{concat, Tensor, Var};

use crate::error::{Error, Result};
use crate::predictions::PredictionVars;
use crate::render::{render, RenderSettings, RenderVars};
use crate::splat::{derive_splats, DiffSplats, SourceView, DEFAULT_RADIUS_SCALE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSplit {
    pub source: Vec<usize>,
    pub targets: Vec<usize>,
}

impl ViewSplit {
    pub fn new(source: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if source.is_empty() || targets.is_empty() {
            return Err(Error::Config("split needs a source and a target".into()));
        }
        Ok(Self { source, targets })
    }
}

/// One uniformly chosen source view; every other view is a target.
pub fn sample_split<R: Rng + ?Sized>(n_views: usize, rng: &mut R) -> Result<ViewSplit> {
    if n_views < 2 {
        return Err(Error::TooFewViews { required: 2, got: n_views });
    }
    let src = rng.random_range(0..n_views);
    Ok(ViewSplit {
        source: vec![src],
        targets: (0..n_views).filter(|&v| v != src).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompatSettings {
    pub radius_scale: f64,
    /// Target pixels with rendered alpha at or below this are ignored.
    pub alpha_min: f64,
    /// Disable to compare every pixel regardless of coverage.
    pub mask_unrendered: bool,
    pub render: RenderSettings,
}

impl Default for CompatSettings {
    fn default() -> Self {
        Self {
            radius_scale: DEFAULT_RADIUS_SCALE,
            alpha_min: 0.2,
            mask_unrendered: true,
            render: RenderSettings::default(),
        }
    }
}

/// Renders of the source splats into each target, in target order.
pub fn render_split<'t>(
    preds: &PredictionVars<'t>,
    images: &[Tensor],
    split: &ViewSplit,
    settings: &CompatSettings,
) -> Result<Vec<(usize, RenderVars<'t>)>> {
    if images.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} images for {} predicted views",
            images.len(),
            preds.len()
        )));
    }
    if let Some(&bad) = split.source.iter().chain(&split.targets).find(|&&v| v >= preds.len()) {
        return Err(Error::Shape(format!("split references view {bad} of {}", preds.len())));
    }
    let mut sources = Vec::with_capacity(split.source.len());
    for &s in &split.source {
        let v = &preds.views[s];
        sources.push(derive_splats(
            &SourceView {
                view: s,
                image: &images[s],
                depth: v.depth,
                confidence: v.confidence,
                camera: v.camera,
                mask: None,
            },
            settings.radius_scale,
        )?);
    }
    let splats = if sources.len() == 1 {
        sources.pop().expect("one source")
    } else {
        merge(sources)?
    };
    split
        .targets
        .iter()
        .map(|&j| Ok((j, render(&splats, &preds.views[j].camera, &settings.render)?)))
        .collect()
}

fn merge<'t>(parts: Vec<DiffSplats<'t>>) -> Result<DiffSplats<'t>> {
    let cat = |f: &dyn Fn(&DiffSplats<'t>) -> Var<'t>| -> Result<Var<'t>> {
        let vs: Vec<Var<'t>> = parts.iter().map(f).collect();
        Ok(concat(&vs, 0)?)
    };
    Ok(DiffSplats {
        centers: cat(&|s| s.centers)?,
        tangent_u: cat(&|s| s.tangent_u)?,
        tangent_v: cat(&|s| s.tangent_v)?,
        radii: cat(&|s| s.radii)?,
        opacity: cat(&|s| s.opacity)?,
        colors: cat(&|s| s.colors)?,
        provenance: parts.iter().flat_map(|s| s.provenance.iter().copied()).collect(),
    })
}

/// Mean ℓ1 difference between `rendered` (`[H, W, C]`) and `target` over the
/// pixels allowed by `alpha`; `None` when no pixel qualifies.
fn masked_l1<'t>(
    rendered: Var<'t>,
    target: Var<'t>,
    alpha: &Tensor,
    settings: &CompatSettings,
) -> Result<Option<Var<'t>>> {
    let tape = rendered.tape();
    let shape = rendered.shape();
    let channels = shape[2];
    let mask: Vec<f64> = alpha
        .data()
        .iter()
        .map(|&a| if !settings.mask_unrendered || a > settings.alpha_min { 1.0 } else { 0.0 })
        .collect();
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Ok(None);
    }
    let mask = tape.constant(Tensor::new(vec![shape[0], shape[1], 1], mask)?);
    let diff = rendered.sub(target)?.abs().mul(mask)?.sum();
    Ok(Some(diff.scale(1.0 / (count * channels as f64))))
}

fn average<'t>(terms: Vec<Option<Var<'t>>>, zero: Var<'t>, what: &str) -> Result<Var<'t>> {
    let n = terms.len();
    let present: Vec<Var<'t>> = terms.into_iter().flatten().collect();
    if present.is_empty() {
        warn!("{what}: no overlap between source renders and targets");
        return Ok(zero);
    }
    let mut total = present[0];
    for t in &present[1..] {
        total = total.add(*t)?;
    }
    Ok(total.scale(1.0 / n as f64))
}

/// Photometric loss: source splats rendered into each target against the
/// target image composited with the rendered alpha.
pub fn photometric_loss<'t>(
    preds: &PredictionVars<'t>,
    images: &[Tensor],
    split: &ViewSplit,
    settings: &CompatSettings,
) -> Result<Var<'t>> {
    let tape = preds.views[0].depth.tape();
    let renders = render_split(preds, images, split, settings)?;
    let mut terms = Vec::with_capacity(renders.len());
    for (j, r) in renders {
        // composite the target over black with the rendered coverage so
        // partially covered pixels are not pulled toward full opacity
        let sh = r.alpha.shape();
        let target = tape.constant(images[j].clone()).mul(r.alpha.reshape(&[sh[0], sh[1], 1])?)?;
        terms.push(masked_l1(r.color, target, &r.alpha.value(), settings)?);
    }
    average(terms, tape.scalar(0.0), "photometric loss")
}

/// Geometric loss: rendered source depth against each target's own predicted depth.
pub fn geometric_loss<'t>(
    preds: &PredictionVars<'t>,
    images: &[Tensor],
    split: &ViewSplit,
    settings: &CompatSettings,
) -> Result<Var<'t>> {
    let tape = preds.views[0].depth.tape();
    let renders = render_split(preds, images, split, settings)?;
    let mut terms = Vec::with_capacity(renders.len());
    for (j, r) in renders {
        let d = preds.views[j].depth;
        let s = d.shape();
        let expand = |v: Var<'t>| v.reshape(&[s[0], s[1], 1]);
        terms.push(masked_l1(expand(r.depth)?, expand(d)?, &r.alpha.value(), settings)?);
    }
    average(terms, tape.scalar(0.0), "geometric loss")
}
