use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mogp_drmpc::config::ExperimentConfig;
use mogp_drmpc::sim::DisturbanceKind;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mogp-drmpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// A preset with a small training set, written into `dir`.
fn small_config(dir: &Path, preset: &str) -> PathBuf {
    let mut cfg = ExperimentConfig::preset(preset).unwrap();
    cfg.training.n_points = 40;
    cfg.training.sweeps = 15;
    let path = dir.join(format!("{preset}.toml"));
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn train_writes_both_models() {
    let dir = TempDir::new().unwrap();
    let out = run(&["train", "--config", "numerical", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("mogp-dr: experts per dimension ["));
    assert!(stdout.contains("gp-dr: experts per dimension [1, 1]"));
    assert!(dir.path().join("mogp-dr.model.json").exists());
    assert!(dir.path().join("gp-dr.model.json").exists());
}

#[test]
fn missing_config_exits_with_config_code() {
    let out = run(&["train", "--config", "/no/such/experiment.toml"]);
    assert_eq!(code(&out), 2);
    assert!(text(&out.stderr).contains("/no/such/experiment.toml"));
}

#[test]
fn zero_disturbance_trains_single_experts() {
    let dir = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::preset("numerical").unwrap();
    cfg.system.disturbance_lower = vec![0.0; 2];
    cfg.system.disturbance_upper = vec![0.0; 2];
    cfg.disturbance.kind = DisturbanceKind::ZeroDisturbance;
    cfg.disturbance.support_lower = vec![0.0; 2];
    cfg.disturbance.support_upper = vec![0.0; 2];
    cfg.disturbance.mode_offsets = vec![vec![0.0; 2]; cfg.disturbance.mode_offsets.len()];
    cfg.training.n_points = 30;
    let path = dir.path().join("zero.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("mogp-dr: experts per dimension [1, 1]"));
}

#[test]
fn unknown_controller_lists_valid_names() {
    let dir = TempDir::new().unwrap();
    let out = run(&["simulate", "--controller", "mpc", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = text(&out.stderr);
    for name in ["mogp-dr", "gp-dr", "robust-tube"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn robust_simulation_needs_no_model() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&[
        "simulate", "--config", "quadrotor", "--controller", "robust-tube", "--runs", "2", "--steps", "4",
        "--out", d,
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let sub = dir.path().join("robust-tube");
    for f in ["run_000.csv", "run_001.csv", "summary.csv", "timing.csv"] {
        assert!(sub.join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("mogp-dr.model.json").exists());
    let log = fs::read_to_string(sub.join("run_000.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn compare_is_reproducible_and_writes_plots() {
    let cfgdir = TempDir::new().unwrap();
    let cfg = small_config(cfgdir.path(), "quadrotor");
    let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
    for d in &dirs {
        let out = run(&[
            "compare", "--config", cfg.to_str().unwrap(), "--runs", "2", "--steps", "5", "--out",
            d.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", text(&out.stderr));
        let stdout = text(&out.stdout);
        assert!(stdout.contains("MoGP-DR gain"));
        assert!(stdout.contains("robust-tube"));
    }
    for f in ["summary.csv", "run_costs.csv", "mogp-dr/run_001.csv", "gp-dr/run_000.csv", "costs.svg", "trajectories.svg"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        let b = fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
    let costs = fs::read_to_string(dirs[0].path().join("run_costs.csv")).unwrap();
    assert_eq!(costs.lines().next().unwrap(), "run,seed,mogp-dr,gp-dr,robust-tube");
    assert_eq!(costs.lines().count(), 3);
    let svg = fs::read_to_string(dirs[0].path().join("costs.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
}

#[test]
fn single_step_compare_reports_infeasible_start() {
    let cfgdir = TempDir::new().unwrap();
    let cfg = small_config(cfgdir.path(), "numerical");
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "compare", "--config", cfg.to_str().unwrap(), "--runs", "1", "--steps", "1", "--out",
        dir.path().to_str().unwrap(),
    ]);
    // The numerical initial state is outside the feasible region of the
    // exact tube problem, so the relaxed problem handles the first step.
    assert_eq!(code(&out), 4, "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("infeasible step"));
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(dir.path().join("trajectories.svg").exists());
}

#[test]
fn oracle_check_passes_on_fixed_seed() {
    let out = run(&["oracle-check", "--runs", "100", "--seed", "11"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("100 instances"));
    assert_eq!(code(&run(&["oracle-check", "--runs", "0"])), 2);
}
