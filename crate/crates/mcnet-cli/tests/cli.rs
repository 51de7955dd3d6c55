//! End-to-end tests of the command-line interface, driving the compiled
//! binary through synth -> train -> eval -> infer and the table commands.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mcnet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mcnet_cli_{tag}"));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_scene_spec(path: &Path) {
    std::fs::write(
        path,
        r#"{
  "seed": 5,
  "classes": [
    {"name": "floor", "point_count": 140,
     "geometry": {"type": "plane", "center": [0.0, 0.0, 0.0], "extent": [1.5, 1.5]},
     "color_mean": [0.8, 0.2, 0.2], "color_jitter": 0.05, "noise_sigma": 0.01},
    {"name": "roof", "point_count": 100,
     "geometry": {"type": "plane", "center": [0.0, 0.0, 0.8], "extent": [1.5, 1.5]},
     "color_mean": [0.2, 0.2, 0.8], "color_jitter": 0.05, "noise_sigma": 0.01}
  ]
}"#,
    )
    .unwrap();
}

fn write_config(path: &Path, seed: u64, epochs: usize) {
    std::fs::write(
        path,
        format!(
            r#"{{
  "num_levels": 3,
  "channels": [8, 16, 32],
  "k_neighbors": 5,
  "decimation": 4,
  "patch_size": 80,
  "num_classes": 2,
  "learning_rate": 0.05,
  "batch_size": 2,
  "epochs": {epochs},
  "seed": {seed}
}}"#
        ),
    )
    .unwrap();
}

#[test]
fn synth_train_eval_infer_roundtrip() {
    let dir = workdir("roundtrip");
    let spec = dir.join("spec.json");
    let scene = dir.join("scene.ply");
    let config = dir.join("config.json");
    let ckpt = dir.join("ckpt.json");
    let report = dir.join("report.json");
    let labeled = dir.join("labeled.ply");
    write_scene_spec(&spec);
    write_config(&config, 3, 3);

    let out = run(&["synth", "--spec", spec.to_str().unwrap(), "--out", scene.to_str().unwrap()]);
    assert!(out.status.success(), "synth: {}", String::from_utf8_lossy(&out.stderr));
    assert!(scene.exists());

    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        scene.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert!(ckpt_json.get("parameters").is_some());
    assert_eq!(ckpt_json["rng_seed"], 3);

    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        scene.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval: {}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rep["oa"].as_f64().unwrap() >= 0.0);
    assert!(rep["per_class"].as_array().unwrap().len() == 2);

    let out = run(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        scene.to_str().unwrap(),
        "--out",
        labeled.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "infer: {}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&labeled).unwrap();
    assert!(text.contains("property int pred"));
}

#[test]
fn train_is_reproducible_at_the_byte_level() {
    let dir = workdir("determinism");
    let spec = dir.join("spec.json");
    let scene = dir.join("scene.ply");
    let config = dir.join("config.json");
    write_scene_spec(&spec);
    write_config(&config, 11, 2);
    assert!(run(&["synth", "--spec", spec.to_str().unwrap(), "--out", scene.to_str().unwrap()])
        .status
        .success());
    let ckpt_a = dir.join("a.json");
    let ckpt_b = dir.join("b.json");
    for ckpt in [&ckpt_a, &ckpt_b] {
        let out = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            scene.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&ckpt_a).unwrap(), std::fs::read(&ckpt_b).unwrap());
}

#[test]
fn ablate_and_ksweep_emit_tables() {
    let dir = workdir("tables");
    let spec = dir.join("spec.json");
    let scene = dir.join("scene.ply");
    let config = dir.join("config.json");
    write_scene_spec(&spec);
    write_config(&config, 7, 1);
    assert!(run(&["synth", "--spec", spec.to_str().unwrap(), "--out", scene.to_str().unwrap()])
        .status
        .success());

    let table = dir.join("ablation.json");
    let out = run(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--data",
        scene.to_str().unwrap(),
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "ablate: {}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&table).unwrap()).unwrap();
    let rows = parsed["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let labels: Vec<&str> = rows.iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(labels, ["A", "B", "C", "D", "E"]);

    let sweep = dir.join("ksweep.json");
    let out = run(&[
        "ksweep",
        "--config",
        config.to_str().unwrap(),
        "--data",
        scene.to_str().unwrap(),
        "--ks",
        "5",
        "--out",
        sweep.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "ksweep: {}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&sweep).unwrap()).unwrap();
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 1);
    assert_eq!(parsed["rows"][0]["k"], 5);
}

#[test]
fn gradcheck_subcommand_reports_per_check_lines() {
    let out = run(&["gradcheck", "--module", "tensor"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("pass")).count() >= 5, "{stdout}");

    let out = run(&["gradcheck", "--module", "nonsense"]);
    assert!(!out.status.success());
}

#[test]
fn contract_errors_exit_nonzero() {
    let dir = workdir("errors");
    let bad_config = dir.join("bad.json");
    // Channels not strictly increasing: rejected before any work.
    std::fs::write(
        &bad_config,
        r#"{"num_levels": 2, "channels": [16, 16], "patch_size": 64, "num_classes": 2}"#,
    )
    .unwrap();
    let scene = dir.join("scene.ply");
    let spec = dir.join("spec.json");
    write_scene_spec(&spec);
    assert!(run(&["synth", "--spec", spec.to_str().unwrap(), "--out", scene.to_str().unwrap()])
        .status
        .success());
    let out = run(&[
        "train",
        "--config",
        bad_config.to_str().unwrap(),
        "--data",
        scene.to_str().unwrap(),
        "--out",
        dir.join("ckpt.json").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    // Malformed PLY: missing the blue property.
    let broken = dir.join("broken.ply");
    std::fs::write(
        &broken,
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nend_header\n0 0 0 1 2\n",
    )
    .unwrap();
    let out = run(&[
        "eval",
        "--ckpt",
        dir.join("missing.json").to_str().unwrap(),
        "--data",
        broken.to_str().unwrap(),
        "--report",
        dir.join("r.json").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}
