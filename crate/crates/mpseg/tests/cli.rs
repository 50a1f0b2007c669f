//! End-to-end checks of the command-line interface: exit codes, flag
//! precedence, and the staged phantom -> split -> train -> predict ->
//! fuse-fit -> evaluate -> stats flow on a deliberately tiny problem.

use std::path::Path;
use std::process::{Command, Output};

fn mpseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpseg"))
        .args(args)
        .output()
        .expect("spawn mpseg")
}

fn run_ok(args: &[&str]) -> String {
    let out = mpseg(args);
    assert!(
        out.status.success(),
        "mpseg {args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_err(args: &[&str], want_code: i32) -> String {
    let out = mpseg(args);
    assert_eq!(
        out.status.code(),
        Some(want_code),
        "mpseg {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

/// Config small enough that train and run finish in seconds.
fn tiny_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{
  "arch": {"variant": "unet", "levels": 2, "base_channels": 4, "num_classes": 3},
  "planes": 3,
  "max_epochs": 2,
  "patience": 1,
  "train_images_per_epoch": 24,
  "val_images_per_epoch": 24,
  "batch_size": 8,
  "learning_rate": 0.001,
  "target_size": [16, 16],
  "grid_spacing": 1.25,
  "run_folds": [0],
  "seed": 11
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny_dataset(dir: &Path) -> String {
    let ds = dir.join("ds");
    run_ok(&[
        "phantom",
        "--out",
        ds.to_str().unwrap(),
        "--subjects",
        "8",
        "--shape",
        "20",
        "--radii",
        "0.4,0.8",
        "--noise",
        "0.1",
        "--seed",
        "5",
    ]);
    ds.to_str().unwrap().to_string()
}

#[test]
fn help_is_success_and_usage_errors_exit_1() {
    run_ok(&["--help"]);
    run_ok(&["--version"]);
    let err = run_err(&["no-such-subcommand"], 1);
    assert!(err.contains("no-such-subcommand"), "stderr: {err}");
    // a required flag is missing
    run_err(&["train", "--dataset", "x", "--out", "y"], 1);
}

#[test]
fn params_audits_and_rejects_unknown_variants() {
    let out = run_ok(&["params", "--variant", "unet2p", "--levels", "3", "--base", "8"]);
    assert!(out.starts_with("variant,stage,formula_kernel,graph_kernel,delta,other_params"));
    assert!(out.lines().any(|l| l.starts_with("unet2p,total,")));
    let err = run_err(&["params", "--variant", "resnet"], 1);
    assert!(err.contains("resnet"), "stderr: {err}");
}

#[test]
fn phantom_split_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path());
    assert!(Path::new(&ds).join("dataset.json").is_file());
    assert!(Path::new(&ds).join("manifest.json").is_file());

    let out = run_ok(&["split", "--dataset", &ds, "--seed", "11"]);
    assert!(out.contains("fold 4:"), "stdout: {out}");
    assert!(Path::new(&ds).join("folds.json").is_file());

    let missing = tmp.path().join("nowhere");
    let err = run_err(
        &["split", "--dataset", missing.to_str().unwrap(), "--seed", "1"],
        2,
    );
    assert!(err.contains("nowhere"), "stderr: {err}");
}

#[test]
fn staged_pipeline_produces_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path());
    let cfg = tiny_config(tmp.path());
    let fold0 = tmp.path().join("fold0");
    let fold0s = fold0.to_str().unwrap();

    run_ok(&[
        "train", "--config", &cfg, "--dataset", &ds, "--fold", "0", "--out", fold0s,
    ]);
    for f in [
        "manifest.json",
        "planes.json",
        "model.ckpt.json",
        "model.ckpt.bin",
        "train_log.csv",
    ] {
        assert!(fold0.join(f).is_file(), "missing {f}");
    }

    let ckpt = fold0.join("model.ckpt.json");
    let planes = fold0.join("planes.json");
    let probs = tmp.path().join("probs");
    run_ok(&[
        "predict",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--planes",
        planes.to_str().unwrap(),
        "--dataset",
        &ds,
        "--subjects",
        "s000,s001",
        "--out",
        probs.to_str().unwrap(),
    ]);
    assert!(probs.join("s000.probs.json").is_file());
    assert!(probs.join("s001.probs.json").is_file());

    let fusion = tmp.path().join("fusion.json");
    let out = run_ok(&[
        "fuse-fit",
        "--probs",
        probs.to_str().unwrap(),
        "--dataset",
        &ds,
        "--subjects",
        "s000,s001",
        "--planes",
        planes.to_str().unwrap(),
        "--out",
        fusion.to_str().unwrap(),
    ]);
    assert!(out.contains("ce"), "stdout: {out}");
    let fusion_text = std::fs::read_to_string(&fusion).unwrap();
    assert!(fusion_text.contains("weights"));

    let report = tmp.path().join("report.csv");
    run_ok(&[
        "evaluate",
        "--probs",
        probs.to_str().unwrap(),
        "--dataset",
        &ds,
        "--subjects",
        "s000,s001",
        "--fusion",
        fusion.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scope,fold,split,source,subject,class,dice"
    );
    for l in lines {
        assert_eq!(l.split(',').count(), 7, "bad row: {l}");
    }

    let pvals = tmp.path().join("pvals.csv");
    let boxes = tmp.path().join("box.csv");
    run_ok(&[
        "stats",
        "--report",
        report.to_str().unwrap(),
        "--split",
        "eval",
        "--out",
        pvals.to_str().unwrap(),
        "--box",
        boxes.to_str().unwrap(),
    ]);
    let pv = std::fs::read_to_string(&pvals).unwrap();
    assert_eq!(
        pv.lines().next().unwrap(),
        "test,unit,method_a,method_b,n,statistic,p_value,exact"
    );
    // 4 methods (3 planes + fused) -> 6 pairs x 3 tests
    assert_eq!(pv.lines().count(), 1 + 18);
    let bx = std::fs::read_to_string(&boxes).unwrap();
    assert!(bx.lines().next().unwrap().starts_with("method,n,min,p25"));
    assert_eq!(bx.lines().count(), 1 + 4);
}

#[test]
fn dry_run_shows_resolved_config_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = run_ok(&[
        "run", "--config", &cfg, "--dataset", "unused", "--out", "unused", "--dry-run",
    ]);
    assert!(out.contains("\"planes\": 3"), "stdout: {out}");
    assert!(out.contains("\"max_epochs\": 2"));

    let out = run_ok(&[
        "run", "--config", &cfg, "--dataset", "unused", "--out", "unused", "--planes", "1",
        "--dry-run",
    ]);
    assert!(out.contains("\"planes\": 1"), "stdout: {out}");

    // an override that violates validation is a usage error
    run_err(
        &[
            "run", "--config", &cfg, "--dataset", "unused", "--out", "unused", "--batch-size",
            "99", "--dry-run",
        ],
        1,
    );
}

#[test]
fn full_run_writes_the_report_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path());
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("runs");
    let out = run_ok(&[
        "run",
        "--config",
        &cfg,
        "--dataset",
        &ds,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.contains("aggregate fused test"), "stdout: {out}");
    let run_dir = out_dir.join("run-unet-k3-seed11");
    for f in [
        "manifest.json",
        "report.csv",
        "report.json",
        "folds.json",
        "timing.txt",
        "fold0/planes.json",
        "fold0/model.ckpt.json",
        "fold0/model.ckpt.bin",
        "fold0/fusion.json",
        "fold0/train_log.csv",
    ] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let text = std::fs::read_to_string(run_dir.join("report.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "scope,fold,split,source,subject,class,dice"
    );
}
