use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn tco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tco")).args(args).env("RUST_LOG", "warn").output().expect("spawn tco")
}

fn ok(args: &[&str]) -> Output {
    let out = tco(args);
    assert!(out.status.success(), "tco {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A scene and a briefly trained checkpoint, shared by the tests.
struct Fixture {
    _dir: TempDir,
    scene: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let scene = dir.path().join("scene");
        let ckpt = dir.path().join("model.ckpt");
        ok(&["synth", "--layout", "box", "--views", "3", "--res", "32", "--seed", "4", "--out", s(&scene)]);
        ok(&["pretrain", "--scenes", "4", "--steps", "3", "--out-ckpt", s(&ckpt)]);
        Fixture { _dir: dir, scene, ckpt }
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(tco(&[]).status.code(), Some(1));
    assert_eq!(tco(&["synth"]).status.code(), Some(1));
    assert_eq!(tco(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tco(&["ablate", "--suite", "nonsense", "--ckpt", "x"]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let out = ok(&["--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth"));
}

#[test]
fn runtime_errors_exit_2_with_diagnostic() {
    let f = fixture();
    let out = tco(&["run", "--scene", "/nonexistent/scene", "--ckpt", s(&f.ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = tco(&["run", "--scene", s(&f.scene), "--ckpt", "/nonexistent.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pose_task_without_depth_prior_is_a_usage_error() {
    let f = fixture();
    let out = tco(&["run", "--scene", s(&f.scene), "--ckpt", s(&f.ckpt), "--task", "pose", "--priors", "pose"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_steps_reports_baseline_metrics() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.json");
    ok(&["run", "--scene", s(&f.scene), "--ckpt", s(&f.ckpt), "--steps", "0", "--report", s(&report)]);
    let r = read_json(&report);
    assert_eq!(r["metrics"], r["baseline"]);
    assert!(r["metrics"]["pointmap"]["acc_mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn run_writes_artifacts_and_verifies() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (report, trace, ply, pred) =
        (dir.path().join("r.json"), dir.path().join("t.jsonl"), dir.path().join("c.ply"), dir.path().join("pred"));
    ok(&[
        "run", "--scene", s(&f.scene), "--ckpt", s(&f.ckpt), "--steps", "3", "--seed", "2",
        "--report", s(&report), "--trace", s(&trace), "--ply", s(&ply), "--pred-out", s(&pred),
    ]);
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(trace_text.lines().count(), 3);
    for line in trace_text.lines() {
        let e: Value = serde_json::from_str(line).unwrap();
        assert!(e["total"].as_f64().unwrap().is_finite());
    }

    let cloud = tco_scene::ply::read_ply(&ply).unwrap();
    assert!(!cloud.is_empty());
    assert!(cloud.len() <= 3 * 32 * 32);

    let out = ok(&["--verify-report", s(&report)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("reproduced"));

    // Evaluating the saved refined predictions reproduces the run's metrics
    // up to the f32 storage of depth.
    let eval_report = dir.path().join("e.json");
    ok(&["eval", "--scene", s(&f.scene), "--pred", s(&pred), "--report", s(&eval_report)]);
    let run = read_json(&report);
    let eval = read_json(&eval_report);
    for key in ["acc_mean", "comp_mean", "nc_mean"] {
        let a = run["metrics"]["pointmap"][key].as_f64().unwrap();
        let b = eval["metrics"]["pointmap"][key].as_f64().unwrap();
        assert!((a - b).abs() <= 1e-6 * a.abs(), "{key}: run {a}, eval {b}");
    }
    assert_eq!(run["metrics"]["trajectory"], eval["metrics"]["trajectory"]);
}

#[test]
fn tampered_report_fails_verification() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.json");
    ok(&["run", "--scene", s(&f.scene), "--ckpt", s(&f.ckpt), "--steps", "1", "--report", s(&report)]);
    let mut r = read_json(&report);
    let acc = r["metrics"]["pointmap"]["acc_mean"].as_f64().unwrap();
    r["metrics"]["pointmap"]["acc_mean"] = Value::from(acc * 1.5);
    std::fs::write(&report, serde_json::to_string(&r).unwrap()).unwrap();
    let out = tco(&["--verify-report", s(&report)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("acc_mean"));
}

#[test]
fn eval_of_ground_truth_is_exact() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("e.json");
    ok(&["eval", "--scene", s(&f.scene), "--pred", s(&f.scene), "--report", s(&report)]);
    let r = read_json(&report);
    assert!(r["metrics"]["pointmap"]["acc_mean"].as_f64().unwrap() < 1e-9);
    assert!(r["metrics"]["trajectory"]["ate"].as_f64().unwrap() < 1e-9);
    assert!(r["metrics"]["pointmap"]["nc_mean"].as_f64().unwrap() > 0.999);
}

#[test]
fn perturbed_priors_feed_a_run() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (a, b, report) = (dir.path().join("a.json"), dir.path().join("b.json"), dir.path().join("r.json"));
    let args = |out: &Path| {
        ok(&["perturb", "--scene", s(&f.scene), "--rot", "3", "--trans", "5", "--focal", "5", "--seed", "9", "--out", s(out)]);
    };
    args(&a);
    args(&b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    ok(&["run", "--scene", s(&f.scene), "--ckpt", s(&f.ckpt), "--steps", "1", "--prior-file", s(&a), "--report", s(&report)]);
    assert_eq!(read_json(&report)["prior_file"].as_str(), Some(s(&a)));
    assert_eq!(tco(&["perturb", "--scene", s(&f.scene), "--rot", "-1", "--out", s(&a)]).status.code(), Some(1));
}

#[test]
fn pose_task_runs_with_depth_prior() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.json");
    ok(&["run", "--scene", s(&f.scene), "--ckpt", s(&f.ckpt), "--task", "pose", "--steps", "2", "--report", s(&report)]);
    let r = read_json(&report);
    assert_eq!(r["config"]["tco"]["task"].as_str(), Some("pose"));
    assert!(r["metrics"]["trajectory"]["ate"].as_f64().unwrap().is_finite());
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let table = dir.path().join("t.json");
    let out = ok(&["ablate", "--suite", "radius_scale", "--ckpt", s(&f.ckpt), "--scenes", "1", "--out", s(&table)]);
    let md = String::from_utf8_lossy(&out.stdout);
    for a in ["0.05", "0.5", "5"] {
        assert!(md.contains(&format!("radius_scale={a}")), "{md}");
    }
    let t = read_json(&table);
    assert!(t.to_string().contains("radius_scale=0.05"));
}
