use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tco_core::model::ToyMvt;

use crate::error::{io_err, CliError, Result};
use crate::pipeline::{run_scene, scene_priors, RunConfig, SceneMetrics};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Agreement required of `--verify-report` re-runs.
pub const VERIFY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub seed: u64,
    pub scene: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub prior_file: Option<PathBuf>,
    /// Saved predictions evaluated by `eval`.
    pub predictions: Option<PathBuf>,
    pub config: Option<RunConfig>,
    /// Step-0 metrics of a run.
    pub baseline: Option<SceneMetrics>,
    pub metrics: SceneMetrics,
    pub trace: Option<PathBuf>,
}

impl MetricsReport {
    pub fn check_finite(&self) -> Result<()> {
        let sets = [("metrics", Some(&self.metrics)), ("baseline", self.baseline.as_ref())];
        for (which, m) in sets {
            if let Some((name, _)) = m.into_iter().flat_map(|m| m.values()).find(|(_, v)| !v.is_finite()) {
                return Err(CliError::NonFinite(format!("{which}.{name}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Format { path: path.into(), detail: e.to_string() })
    }
}

fn compare(which: &str, want: &SceneMetrics, got: &SceneMetrics, out: &mut Vec<String>) {
    for ((name, a), (_, b)) in want.values().iter().zip(got.values()) {
        if !((a - b).abs() <= VERIFY_TOL) {
            out.push(format!("{which}.{name}: reported {a}, re-run {b}"));
        }
    }
}

/// Re-execute the run a report describes and check that every metric agrees
/// within [`VERIFY_TOL`].
pub fn verify_report(report: &MetricsReport) -> Result<()> {
    let (Some(cfg), Some(ckpt)) = (&report.config, &report.checkpoint) else {
        return Err(CliError::Verify("report does not describe a run (no config or checkpoint)".into()));
    };
    let scene = tco_scene::read_scene(&report.scene)?;
    let model = ToyMvt::load(ckpt)?;
    let priors = scene_priors(&scene, cfg.tco.priors, report.prior_file.as_deref())?;
    let out = run_scene(&model, &scene, &priors, cfg)?;
    let mut diffs = Vec::new();
    compare("metrics", &report.metrics, &out.refined, &mut diffs);
    if let Some(b) = &report.baseline {
        compare("baseline", b, &out.baseline, &mut diffs);
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(diffs.join("; ")))
    }
}
