//! Integration tests for the command-line interface, run against the built
//! binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn a2j(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2j"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("cfg.toml");
    fs::write(
        &path,
        r#"
[model]
input_w = 32
input_h = 32
joints = 3
backbone_channels = [4, 4, 6, 6]
regression_channels = 6
regression_layers = 1
branch_channels = 4

[train]
epochs = 2
lr_decay_interval = 2
batch_size = 4

[gen]
joints = 3
crop_w = 32
crop_h = 32
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for sub in ["a", "b"] {
        let out = a2j(&[
            "gen-data",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--samples",
            "5",
            "--out",
            dir.path().join(sub).to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["manifest.json", "depth.bin"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    let out = a2j(&[
        "gen-data", "--config", &cfg, "--seed", "3", "--samples", "8",
        "--out", ds.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = a2j(&[
        "train", "--config", &cfg, "--data", ds.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint/params.bin").exists());
    assert!(run.join("loss_log.csv").exists());
    assert!(run.join("run_record.txt").exists());

    let eval = dir.path().join("eval");
    let out = a2j(&[
        "eval", "--config", &cfg, "--data", ds.to_str().unwrap(),
        "--checkpoint", run.join("checkpoint").to_str().unwrap(),
        "--out", eval.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.contains("mean_3d_error_mm"));

    let infer = dir.path().join("infer");
    let out = a2j(&[
        "infer", "--config", &cfg, "--data", ds.to_str().unwrap(),
        "--checkpoint", run.join("checkpoint").to_str().unwrap(),
        "--out", infer.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let poses = fs::read_to_string(infer.join("poses.csv")).unwrap();
    // 8 frames x 3 joints + header
    assert_eq!(poses.lines().count(), 25);
}

#[test]
fn grad_check_exits_zero_on_the_healthy_build() {
    let out = a2j(&["grad-check", "--seeds", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("end_to_end_total_loss"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn inspect_anchors_on_a_fresh_model_has_no_informative_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let insp = dir.path().join("insp");
    let out = a2j(&[
        "inspect-anchors", "--config", &cfg, "--seed", "5",
        "--out", insp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(insp.join("anchors.svg").exists());
    let csv = fs::read_to_string(insp.join("anchors.csv")).unwrap();
    let mut sums = std::collections::HashMap::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let joint: usize = cols[0].parse().unwrap();
        let weight: f32 = cols[4].parse().unwrap();
        let informative: u8 = cols[8].parse().unwrap();
        // zero-initialized heads give uniform weights, all below 0.02 on a
        // 64-anchor grid
        assert_eq!(informative, 0, "informative anchor on a fresh model: {line}");
        *sums.entry(joint).or_insert(0.0f32) += weight;
    }
    assert_eq!(sums.len(), 3);
    for (j, s) in sums {
        assert!((s - 1.0).abs() < 1e-5, "joint {j} weights sum to {s}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let out = a2j(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = a2j(&["gen-data", "--nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = a2j(&[
        "train",
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
