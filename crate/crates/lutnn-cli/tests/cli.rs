//! Drive the binary end to end on a miniature configuration.

use std::path::Path;
use std::process::Command;

fn lutnn_bin() -> &'static str {
    env!("CARGO_BIN_EXE_lutnn")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "dataset": {"kind": "synthetic", "train": 192, "test": 96,
                     "features": 16, "classes": 4, "noise": 0.4},
        "network": {"input": [16], "layers": [
            {"kind": "dense", "outputs": 12},
            {"kind": "dense", "outputs": 8},
            {"kind": "dense", "outputs": 4}
        ]},
        "train": {"epochs": [2, 1, 1], "batch_size": 32, "lr": 0.01},
        "prune": {"density": 0.6},
        "expand": {"k": 3, "p": 0},
        "output_dir": dir.join("out")
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> String {
    let out = Command::new(lutnn_bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "lutnn {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_flow_through_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    run(&["train", "--config", cfg]);
    run(&["prune", "--config", cfg]);
    run(&["expand", "--config", cfg]);
    run(&["export", "--config", cfg]);
    let out = dir.path().join("out");
    for f in [
        "phase1.json",
        "phase2.json",
        "phase3.json",
        "netlist.json",
        "network_generic.v",
        "network_primitive.v",
        "area.json",
        "area.txt",
        "metrics.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let sim = run(&["simulate", "--config", cfg, "--limit", "64"]);
    assert!(sim.contains("accuracy"), "{sim}");
    let netlist = out.join("netlist.json");
    let report = run(&["report", "--netlist", netlist.to_str().unwrap()]);
    assert!(report.contains("total"), "{report}");
}

#[test]
fn expand_without_phase2_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = Command::new(lutnn_bin())
        .args(["expand", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn flag_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    run(&[
        "train",
        "--config",
        cfg,
        "--seed",
        "9",
        "--phase-epochs",
        "1,1,1",
    ]);
    // infeasible override is rejected up front
    let out = Command::new(lutnn_bin())
        .args(["train", "--config", cfg, "--klut", "6", "--pinputs", "5"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
