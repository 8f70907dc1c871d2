use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nfrl_cli::config::{Algorithm, RunConfig, GAMMA_FUT_PRESETS};
use nfrl_cli::run::{read_metrics, CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE, RUN_DIR_ENV};
use nfrl_core::flow::FlowModel;

fn nfrl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfrl")).args(args).env(RUN_DIR_ENV, root).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tiny_overrides() -> Vec<&'static str> {
    vec!["--set", "blocks=2", "--set", "channels=8", "--set", "rep_dims=4", "--set", "encoder_width=8", "--set", "encoder_layers=1", "--set", "batch_size=16"]
}

fn u_maze_dataset(dir: &Path) -> PathBuf {
    let p = dir.join("u.nfds");
    let o = nfrl(dir, &["gen-data", "u_maze", "--n-traj", "6", "--seed", "3", "--out", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    p
}

#[test]
fn defaults_mirror_the_hyperparameter_tables() {
    let bc = RunConfig::defaults(Algorithm::Bc);
    assert_eq!(bc.blocks, 12);
    for a in [Algorithm::Gcbc, Algorithm::Rlbc] {
        assert_eq!(RunConfig::defaults(a).blocks, 6);
    }
    for a in [Algorithm::Bc, Algorithm::Gcbc, Algorithm::Rlbc] {
        let c = RunConfig::defaults(a);
        assert_eq!((c.channels, c.rep_dims, c.encoder_layers), (512, 512, 4));
        assert_eq!(c.noise_std, 0.1);
    }
    let u = RunConfig::defaults(Algorithm::Ugs);
    assert_eq!((u.blocks, u.channels, u.encoder_layers, u.encoder_width), (6, 256, 4, 1024));
    assert_eq!((u.mask_prob, u.candidate_count, u.goal_noise, u.gamma), (0.1, 1024, 0.05, 0.99));
    assert_eq!(RunConfig::defaults(Algorithm::Gcbc).gamma_fut, 0.97);
    assert_eq!(GAMMA_FUT_PRESETS, [0.97, 0.99]);
    assert_eq!(nfrl_rl::rlbc::ALPHA_PRESETS, [1.0, 10.0]);
    let r = RunConfig::defaults(Algorithm::Rlbc);
    assert_eq!((r.alpha_bc, r.lambda_ent, r.gamma), (1.0, 0.0, 0.99));
}

#[test]
fn zero_step_train_writes_manifest_and_initial_checkpoint_only() {
    let root = tempfile::tempdir().unwrap();
    let o = nfrl(root.path(), &["train", "--algo", "bc", "--steps", "0", "--run-name", "r0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = root.path().join("r0");
    let mut names: Vec<String> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, vec![CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE]);
    assert!(read_metrics(&dir).unwrap().is_empty());
    let m = FlowModel::load(&dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(m.config().blocks, 12);
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("meta.code_version="));
    assert!(manifest.contains("blocks=12"));
}

#[test]
fn same_config_and_seed_give_identical_metric_series() {
    let root = tempfile::tempdir().unwrap();
    let ds = u_maze_dataset(root.path());
    let mut series = Vec::new();
    for name in ["a", "b"] {
        let mut args = vec!["train", "--algo", "gcbc", "--steps", "12", "--seed", "5", "--run-name", name, "--dataset", ds.to_str().unwrap()];
        args.extend(tiny_overrides());
        let o = nfrl(root.path(), &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        series.push(std::fs::read(root.path().join(name).join(METRICS_FILE)).unwrap());
    }
    assert!(!series[0].is_empty());
    assert_eq!(series[0], series[1]);
}

#[test]
fn manifest_alone_recreates_the_run() {
    let root = tempfile::tempdir().unwrap();
    let ds = u_maze_dataset(root.path());
    let mut args = vec!["train", "--algo", "rlbc", "--steps", "6", "--seed", "2", "--run-name", "orig", "--dataset", ds.to_str().unwrap(), "--set", "critic_hidden=8,8"];
    args.extend(tiny_overrides());
    assert_eq!(code(&nfrl(root.path(), &args)), 0);
    let kept = root.path().join("manifest-copy.txt");
    std::fs::copy(root.path().join("orig").join(MANIFEST_FILE), &kept).unwrap();
    let first_metrics = std::fs::read(root.path().join("orig").join(METRICS_FILE)).unwrap();
    let first_ckpt = std::fs::read(root.path().join("orig").join(CHECKPOINT_FILE)).unwrap();
    std::fs::remove_dir_all(root.path().join("orig")).unwrap();
    let o = nfrl(root.path(), &["train", "--config", kept.to_str().unwrap(), "--run-name", "orig"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(root.path().join("orig").join(METRICS_FILE)).unwrap(), first_metrics);
    assert_eq!(std::fs::read(root.path().join("orig").join(CHECKPOINT_FILE)).unwrap(), first_ckpt);
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let root = tempfile::tempdir().unwrap();
    let o = nfrl(root.path(), &["train", "--algo", "gcbc", "--set", "mask_prob=2"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mask_prob"));
    let o = nfrl(root.path(), &["train", "--algo", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("algorithm"));
    let o = nfrl(root.path(), &["train", "--algo", "bc", "--set", "chanels=3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("chanels"));
}

#[test]
fn numeric_failure_exits_3_and_keeps_the_last_good_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let o = nfrl(root.path(), &["train", "--algo", "density-mle", "--dataset", "mixture", "--steps", "50", "--run-name", "boom", "--set", "lr=1e300", "--set", "blocks=2", "--set", "channels=8", "--set", "eval_every=1"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = root.path().join("boom").join(CHECKPOINT_FILE);
    let m = FlowModel::load(&ckpt).unwrap();
    assert!(m.params().all_finite());
}

#[test]
fn eval_handles_empty_runs_bad_magic_and_mismatched_models() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--algo", "gcbc", "--steps", "0", "--run-name", "g"];
    args.extend(tiny_overrides());
    assert_eq!(code(&nfrl(root.path(), &args)), 0);
    let ckpt = root.path().join("g").join(CHECKPOINT_FILE);
    let report = root.path().join("rep.txt");
    let o = nfrl(root.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--env", "u_maze", "--episodes", "0", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("episodes=0"));

    let o = nfrl(root.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--env", "open", "--episodes", "3", "--denoise", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 4);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xFF;
    let bad = root.path().join("bad.nfrl");
    std::fs::write(&bad, bytes).unwrap();
    let o = nfrl(root.path(), &["eval", "--checkpoint", bad.to_str().unwrap(), "--env", "u_maze"]);
    assert_eq!(code(&o), 2);

    let o = nfrl(root.path(), &["train", "--algo", "density-mle", "--steps", "0", "--run-name", "d", "--set", "blocks=1", "--set", "channels=4"]);
    assert_eq!(code(&o), 0);
    let o = nfrl(root.path(), &["eval", "--checkpoint", root.path().join("d").join(CHECKPOINT_FILE).to_str().unwrap(), "--env", "u_maze"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("conditioned on 0"));
}

#[test]
fn check_suites_report_and_reject_unknown_names() {
    let root = tempfile::tempdir().unwrap();
    let o = nfrl(root.path(), &["check", "jacobian", "--quick"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("jacobian") && out.contains("pass"));
    let o = nfrl(root.path(), &["check", "gradients"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(code(&nfrl(root.path(), &["check", "everything"])), 2);
}

#[test]
fn plot_export_writes_long_rows() {
    let root = tempfile::tempdir().unwrap();
    let o = nfrl(root.path(), &["train", "--algo", "density-vi", "--dataset", "gaussian", "--steps", "5", "--run-name", "v", "--set", "blocks=2", "--set", "channels=8", "--set", "batch_size=8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = root.path().join("long.csv");
    let o = nfrl(root.path(), &["plot-export", root.path().join("v").to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "run,series,step,metric,value");
    assert_eq!(text.lines().filter(|l| l.starts_with("v,train,")).count(), 5 * 3);
}

#[test]
fn gen_data_writes_loadable_files() {
    let root = tempfile::tempdir().unwrap();
    let ds = u_maze_dataset(root.path());
    let loaded = nfrl_rl::Dataset::load(&ds).unwrap();
    assert_eq!(loaded.trajectories.len(), 6);
    let pts = root.path().join("moons.txt");
    let o = nfrl(root.path(), &["gen-data", "two-moons", "--samples", "100", "--out", pts.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(nfrl_cli::datasets::read_points_file(&pts).unwrap().rows(), 100);
    assert_eq!(code(&nfrl(root.path(), &["gen-data", "atlantis", "--out", pts.to_str().unwrap()])), 2);
}
