use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use tco_cli::bench::{ablate, pretrain_model, BenchConfig, PretrainSpec, Suite};
use tco_cli::error::{CliError, Result};
use tco_cli::pipeline::{geometry_of, run_scene, scene_priors, DecoderNoise, RunConfig, evaluate};
use tco_cli::report::{verify_report, MetricsReport, TOOL_VERSION};
use tco_core::model::ToyMvt;
use tco_core::optim::{EnabledPriors, Task, TcoConfig};
use tco_evalkit::EvalConfig;
use tco_scene::ply::{cloud_from_predictions, write_ply, PlyFormat};
use tco_scene::{perturb_priors, Layout, Noise, PriorFile, SynthSpec};

#[derive(Parser, Debug)]
#[command(name = "tco", version, about = "Test-time constrained optimization of a toy multiview network")]
struct Cli {
    /// Re-run the experiment recorded in a report and check its metrics.
    #[arg(long, value_name = "REPORT")]
    verify_report: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene directory with ground truth.
    Synth {
        #[arg(long, default_value = "plane")]
        layout: Layout,
        #[arg(long, default_value_t = 6)]
        views: usize,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Arc spanned by the cameras, in degrees.
        #[arg(long, default_value_t = 40.0)]
        baseline: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on synthetic scenes.
    Pretrain {
        /// Size of the training scene pool.
        #[arg(long, default_value_t = 100_000)]
        scenes: u64,
        #[arg(long, default_value_t = 6000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_ckpt: PathBuf,
    },
    /// Adapt the model to one scene and report metrics before and after.
    Run(RunArgs),
    /// Evaluate saved predictions against a scene's ground truth.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a perturbed copy of a scene's pose and intrinsics priors.
    Perturb {
        #[arg(long)]
        scene: PathBuf,
        /// Rotation noise in degrees.
        #[arg(long, default_value_t = 0.0)]
        rot: f64,
        /// Translation noise in percent.
        #[arg(long, default_value_t = 0.0)]
        trans: f64,
        /// Focal noise in percent.
        #[arg(long, default_value_t = 0.0)]
        focal: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one setting over the synthetic benchmark.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        /// Write the full table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Pointmap,
    Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PriorArg {
    Pose,
    Intr,
    Depth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Heads {
    None,
    Camera,
    Depth,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlyArg {
    Ascii,
    Binary,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "pointmap")]
    task: TaskArg,
    /// Comma-separated; defaults to pose,intr for pointmap and depth for pose.
    #[arg(long, value_enum, value_delimiter = ',')]
    priors: Option<Vec<PriorArg>>,
    /// Perturbed priors written by `perturb`.
    #[arg(long)]
    prior_file: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    mu1: Option<f64>,
    #[arg(long)]
    mu2: Option<f64>,
    #[arg(long)]
    mu3: Option<f64>,
    /// Splat radius scale.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Heads trained alongside the decoder adapters.
    #[arg(long, value_enum, default_value = "none")]
    finetune_heads: Heads,
    /// Corrupt the decoder before adapting, relative to each weight's norm.
    #[arg(long)]
    decoder_noise: Option<f64>,
    #[arg(long, default_value_t = 2)]
    decoder_noise_rank: usize,
    #[arg(long, default_value_t = 0)]
    decoder_noise_seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    ply: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    ply_format: PlyArg,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Save refined depth, poses and intrinsics for `eval`.
    #[arg(long)]
    pred_out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut tco = match self.task {
            TaskArg::Pointmap => TcoConfig::default(),
            TaskArg::Pose => TcoConfig::pose_task(),
        };
        if let Some(p) = &self.priors {
            tco.priors = EnabledPriors {
                pose: p.contains(&PriorArg::Pose),
                intrinsics: p.contains(&PriorArg::Intr),
                depth: p.contains(&PriorArg::Depth),
            };
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut tco.lr, self.lr);
        set(&mut tco.lambda1, self.lambda1);
        set(&mut tco.mu1, self.mu1);
        set(&mut tco.mu2, self.mu2);
        set(&mut tco.mu3, self.mu3);
        set(&mut tco.radius_scale, self.alpha);
        if let Some(s) = self.steps {
            tco.steps = s;
        }
        tco.seed = self.seed;
        tco.trainable = match self.finetune_heads {
            Heads::None => tco.trainable,
            Heads::Camera => tco.trainable.with_heads(false, true),
            Heads::Depth => tco.trainable.with_heads(true, false),
            Heads::Both => tco.trainable.with_heads(true, true),
        };
        tco.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if matches!(tco.task, Task::Pose) && !tco.priors.depth {
            return Err(CliError::Usage("the pose task needs the depth prior".into()));
        }
        let decoder_noise = self
            .decoder_noise
            .map(|strength| DecoderNoise { strength, rank: self.decoder_noise_rank, seed: self.decoder_noise_seed });
        Ok(RunConfig { tco, lora_rank: self.lora_rank, decoder_noise, eval: EvalConfig { seed: self.seed, ..EvalConfig::default() } })
    }
}

fn emit(report: &MetricsReport, path: Option<&Path>) -> Result<()> {
    report.check_finite()?;
    match path {
        Some(p) => report.write(p),
        None => {
            print!("{}", report.to_json());
            Ok(())
        }
    }
}

fn load_gt_scene(dir: &Path) -> Result<tco_scene::Scene> {
    let scene = tco_scene::read_scene(dir)?;
    if scene.gt.is_none() {
        return Err(CliError::NoGroundTruth(dir.into()));
    }
    Ok(scene)
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = a.config()?;
    let scene = load_gt_scene(&a.scene)?;
    let model = ToyMvt::load(&a.ckpt)?;
    let priors = scene_priors(&scene, cfg.tco.priors, a.prior_file.as_deref())?;
    let out = run_scene(&model, &scene, &priors, &cfg)?;
    if let Some(p) = &a.trace {
        out.tco.trace.write_jsonl(p)?;
    }
    if let Some(p) = &a.ply {
        let format = match a.ply_format {
            PlyArg::Ascii => PlyFormat::Ascii,
            PlyArg::Binary => PlyFormat::BinaryLittleEndian,
        };
        write_ply(p, &cloud_from_predictions(&out.tco.refined, &scene.images)?, format)?;
    }
    if let Some(dir) = &a.pred_out {
        tco_scene::write_geometry(dir, &geometry_of(&out.tco.refined))?;
    }
    info!(
        "acc {:.4} -> {:.4}, comp {:.4} -> {:.4}",
        out.baseline.pointmap.acc_mean, out.refined.pointmap.acc_mean, out.baseline.pointmap.comp_mean, out.refined.pointmap.comp_mean
    );
    let report = MetricsReport {
        version: TOOL_VERSION.to_string(),
        seed: a.seed,
        scene: a.scene.clone(),
        checkpoint: Some(a.ckpt.clone()),
        prior_file: a.prior_file.clone(),
        predictions: None,
        config: Some(cfg),
        baseline: Some(out.baseline),
        metrics: out.refined,
        trace: a.trace.clone(),
    };
    emit(&report, a.report.as_deref())
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth { layout, views, res, seed, baseline, out } => {
            let spec = SynthSpec { layout: *layout, texture_seed: *seed, n_views: *views, resolution: *res, baseline: *baseline };
            let scene = tco_scene::synth_scene(&spec)?;
            tco_scene::write_scene(out, &scene)?;
            info!("wrote {} views to {}", scene.n_views(), out.display());
            Ok(())
        }
        Command::Pretrain { scenes, steps, lr, seed, out_ckpt } => {
            let spec = PretrainSpec { steps: *steps, lr: *lr, seed: *seed, pool: *scenes, ..PretrainSpec::default() };
            let (model, history) = pretrain_model(&spec)?;
            let tail = &history[history.len().saturating_sub(100)..];
            info!("final loss {:.4}", tail.iter().sum::<f64>() / tail.len().max(1) as f64);
            model.save(out_ckpt)?;
            Ok(())
        }
        Command::Run(a) => run(a),
        Command::Eval { scene, pred, report } => {
            let s = load_gt_scene(scene)?;
            let p = tco_scene::read_geometry(pred)?;
            let metrics = evaluate(&p, s.gt.as_ref().expect("checked"), &EvalConfig::default())?;
            let r = MetricsReport {
                version: TOOL_VERSION.to_string(),
                seed: EvalConfig::default().seed,
                scene: scene.clone(),
                checkpoint: None,
                prior_file: None,
                predictions: Some(pred.clone()),
                config: None,
                baseline: None,
                metrics,
                trace: None,
            };
            emit(&r, report.as_deref())
        }
        Command::Perturb { scene, rot, trans, focal, seed, out } => {
            let noise = Noise::new(*rot, *trans, *focal).map_err(|e| CliError::Usage(e.to_string()))?;
            let s = tco_scene::read_scene(scene)?;
            let priors = perturb_priors(&s.priors(true, true, false)?, &noise, *seed)?;
            PriorFile::from_priors(&priors, noise, *seed).write(out)?;
            Ok(())
        }
        Command::Ablate { suite, ckpt, scenes, out } => {
            let suite: Suite = suite.parse()?;
            let model = ToyMvt::load(ckpt)?;
            let bench = BenchConfig { scenes: *scenes, ..BenchConfig::default() };
            let table = ablate(&model, suite, &bench)?;
            print!("{}", table.to_markdown());
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&table).expect("tables serialize") + "\n";
                fs::write(p, json).map_err(|e| CliError::Io { path: p.clone(), source: e })?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match (&cli.verify_report, &cli.command) {
        (Some(path), None) => MetricsReport::read(path).and_then(|r| verify_report(&r)).map(|_| {
            println!("{}: reproduced within tolerance", path.display());
        }),
        (None, Some(cmd)) => dispatch(cmd),
        (Some(_), Some(_)) => Err(CliError::Usage("--verify-report takes no subcommand".into())),
        (None, None) => Err(CliError::Usage("no command given; see --help".into())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
