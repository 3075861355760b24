use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FAST: [&str; 4] = ["--override", "train.epochs=1", "--override", "train.steps_per_epoch=2"];

fn skyalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyalign"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = skyalign(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn toy_training_writes_checkpoint_log_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let mut args = vec!["train", "--out", out_s, "--override", "schedule.variant=NO_RESTART"];
    args.extend(FAST);
    ok(&args);
    for f in ["final.ckpt", "train_log.csv", "manifest.json", "config.txt", "losses.svg", "alpha.svg", "lr.svg"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let log = read(&out.join("train_log.csv"));
    assert!(log.lines().next().unwrap().contains("variant=NO_RESTART"));

    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["version"].is_string());

    // the written config reproduces the run exactly
    let again = dir.path().join("again");
    let cfg = out.join("config.txt");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(log, read(&again.join("train_log.csv")));

    let ckpt = out.join("final.ckpt");
    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", ev.to_str().unwrap(), "--protocol", "uav2sat"]);
    assert!(ev.join("metrics_uav2sat.json").exists());
    assert!(ev.join("top10_uav2sat.csv").exists());

    ok(&["report", "--out", out_s]);
    assert!(read(&out.join("summary.txt")).contains("final epoch 0"));
}

#[test]
fn missing_dataset_root_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = skyalign(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "data.source=university1652",
        "--override",
        "data.root=/definitely/not/here",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = skyalign(&["train", "--image-size", "256", "--out", dir.path().to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(skyalign(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = skyalign(&["train", "--out", dir.path().to_str().unwrap(), "--override", "no.such.key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(skyalign(&["eval"]).status.code(), Some(1));
}

#[test]
fn oracle_eval_is_perfect_for_single_and_multi_query() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["eval", "--oracle", "--out", out, "--protocol", "uav2sat", "--protocol", "uav2sat-multi"]);
    let reports: Vec<serde_json::Value> = serde_json::from_str(&read(&dir.path().join("metrics.json"))).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["protocol"], "uav2sat");
    assert_eq!(reports[1]["protocol"], "uav2sat-multi");
    for r in &reports {
        for k in ["R@1", "R@5", "R@10", "AP"] {
            assert_eq!(r[k].as_f64(), Some(1.0), "{k} of {}", r["protocol"]);
        }
    }
}

#[test]
fn absent_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = skyalign(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn ablation_has_three_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["ablate", "--out", out.to_str().unwrap(), "--seed", "7"];
        args.extend(FAST);
        ok(&args);
        read(&out.join("ablation.csv"))
    };
    let first = run("a");
    let lines: Vec<&str> = first.lines().collect();
    assert!(lines[0].starts_with("# seeds=7 "));
    assert_eq!(lines.len(), 5);
    for (line, v) in lines[2..].iter().zip(["PVDA", "CONSTANT_ALPHA", "NO_RESTART"]) {
        assert!(line.starts_with(&format!("{v},1,")), "{line}");
    }
    assert!(dir.path().join("a/ablation.svg").exists());
    assert_eq!(first, run("b"));
}

#[test]
fn exported_toy_tree_loads_as_disk_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("tree");
    ok(&["toygen", "--out", tree.to_str().unwrap()]);
    for sub in ["train/drone", "train/satellite", "test/query_drone", "test/gallery_satellite"] {
        assert!(tree.join(sub).is_dir(), "missing {sub}");
    }
    let root = format!("data.root={}", tree.display());
    let run = dir.path().join("run");
    let mut args = vec![
        "train",
        "--out",
        run.to_str().unwrap(),
        "--override",
        "data.source=university1652",
        "--override",
        &root,
        "--override",
        "data.image_size=32",
        "--override",
        "model.backbone=tiny",
    ];
    args.extend(FAST);
    ok(&args);
    assert!(run.join("load_report.json").exists());
}
