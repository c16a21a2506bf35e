//! End-to-end checks of the CLI surface: exit codes, JSON error output,
//! the RATEBENCH_OUT override, and the train / probe / eval verbs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ratebench")
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ratebench_cli_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_env(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn ratebench")
}

fn tiny_train_sets() -> Vec<String> {
    [
        "steps=40",
        "eval_every=40",
        "batch_size=2",
        "target_kl_nats=10.0",
        "model.encoder_channels=[4, 8, 12, 16]",
        "model.latent_dim=8",
        "bottleneck.latent_dim=8",
        "dataset.n_items=8",
        "dataset.segment_s=0.25",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn set_args(sets: &[String]) -> Vec<String> {
    sets.iter().flat_map(|s| ["--set".to_string(), s.clone()]).collect()
}

#[test]
fn train_respects_out_env_and_writes_artifacts() {
    let dir = tmp("train_env");
    let sets = set_args(&tiny_train_sets());
    let mut args: Vec<&str> = vec!["train"];
    args.extend(sets.iter().map(|s| s.as_str()));
    let out = run_env(&args, &[("RATEBENCH_OUT", &dir)]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let train_dir = dir.join("train");
    assert!(train_dir.join("metrics.jsonl").exists());
    assert!(train_dir.join("checkpoint.rbck").exists());
    // stdout is a JSON summary.
    let line = String::from_utf8_lossy(&out.stdout);
    let parsed: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(parsed.get("measured_bitrate_bps").is_some());
}

#[test]
fn explicit_out_flag_beats_env() {
    let env_dir = tmp("train_envside");
    let flag_dir = tmp("train_flagside");
    let sets = set_args(&tiny_train_sets());
    let mut args: Vec<&str> = vec!["train", "--out", flag_dir.to_str().unwrap()];
    args.extend(sets.iter().map(|s| s.as_str()));
    let out = run_env(&args, &[("RATEBENCH_OUT", &env_dir)]);
    assert!(out.status.success());
    assert!(flag_dir.join("train/checkpoint.rbck").exists());
    assert!(!env_dir.join("train").exists());
}

#[test]
fn errors_are_machine_readable_json_with_nonzero_exit() {
    // Unknown config key through --set.
    let dir = tmp("err_json");
    let out = run_env(
        &["train", "--set", "stepz=40", "--out", dir.to_str().unwrap()],
        &[],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim())
        .unwrap_or_else(|e| panic!("stderr not JSON ({e}): {stderr}"));
    assert_eq!(parsed["kind"], "config");
    assert!(parsed["error"].as_str().unwrap().contains("stepz"));

    // Missing checkpoint file for eval.
    let out = run_env(&["eval", "--vae", "/nonexistent/vae.rbck"], &[]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert!(parsed.get("kind").is_some());
}

#[test]
fn probe_and_eval_run_on_a_trained_checkpoint() {
    let dir = tmp("probe_eval");
    let sets = set_args(&tiny_train_sets());
    let mut args: Vec<&str> = vec!["train", "--out", dir.to_str().unwrap()];
    args.extend(sets.iter().map(|s| s.as_str()));
    let out = run_env(&args, &[]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.join("train/checkpoint.rbck");

    // Probe emits the JSON report with the three required fields.
    let report_path = dir.join("probe.json");
    let out = run_env(
        &[
            "probe",
            "--vae",
            ckpt.to_str().unwrap(),
            "--out",
            report_path.to_str().unwrap(),
            "--set",
            "steps=60",
            "--set",
            "hidden=16",
            "--set",
            "batch_size=4",
        ],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["vae_id", "measured_bitrate", "predictability_score"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }

    // Eval prints metrics and writes WAV pairs.
    let wav_dir = dir.join("wavs");
    let out = run_env(
        &[
            "eval",
            "--vae",
            ckpt.to_str().unwrap(),
            "--wav-out",
            wav_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert!(parsed["mel_distance"].as_f64().unwrap() >= 0.0);
    let wavs: Vec<_> = std::fs::read_dir(&wav_dir).unwrap().collect();
    assert!(wavs.len() >= 2, "expected original/reconstruction pairs");
}
