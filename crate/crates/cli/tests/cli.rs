use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn brainho(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainho"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Last stdout line is the run directory (or the manifest for `synth`).
fn last_line(o: &Output) -> PathBuf {
    let text = String::from_utf8_lossy(&o.stdout);
    PathBuf::from(text.lines().last().expect("output").trim())
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "model": {"d": 8, "heads": 2, "layers": 1, "k": 3},
  "train": {"epochs": 3, "batch_size": 8, "lr": 1e-3},
  "seed": 4
}"#,
    )
    .unwrap();
    path
}

fn synth(dir: &Path) -> PathBuf {
    let o = brainho(&[
        "synth", "--n", "20", "--subjects", "40", "--seed", "2",
        "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    last_line(&o)
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let ok = brainho(&["gradcheck"]);
    assert_eq!(code(&ok), 0);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("PASS"));
    assert!(text.contains("blocks.0.subgraph.query"));

    let bad = brainho(&["gradcheck", "--inject-sparsemax-fault"]);
    assert_eq!(code(&bad), 3);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"karma": 5}"#).unwrap();
    let o = brainho(&["train", "--synth", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("karma"));
    assert_eq!(code(&brainho(&["frobnicate"])), 1);
    assert_eq!(code(&brainho(&["train", "--synth", "1", "--set", "model.heads=5"])), 1);
}

#[test]
fn missing_data_exits_two() {
    let o = brainho(&["train", "--data", "/nonexistent/manifest.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn single_threaded_training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let cfg = small_config(dir.path());
    let run = || {
        let o = brainho(&[
            "--threads", "1", "train",
            "--data", manifest.to_str().unwrap(),
            "--config", cfg.to_str().unwrap(),
            "--out", dir.path().join("runs").to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        last_line(&o)
    };
    let a = run();
    let b = run();
    assert_ne!(a, b);
    for file in ["checkpoint.bin", "training_log.csv", "train_report.json", "config.json", "split.json"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }
    let log = fs::read_to_string(a.join("training_log.csv")).unwrap();
    assert!(log.starts_with("step,cls,aux,oc,hc,beta,total,lr\n"));

    // effective config records the override precedence
    let o = brainho(&[
        "--threads", "1", "train",
        "--data", manifest.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--lr", "2e-3",
        "--out", dir.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(last_line(&o).join("config.json")).unwrap()).unwrap();
    assert_eq!(written["train"]["lr"], 2e-3);
    assert_eq!(written["model"]["n"], 20);
}

#[test]
fn evaluate_then_interpret() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let cfg = small_config(dir.path());
    let o = brainho(&[
        "evaluate",
        "--data", manifest.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--set", "data.folds=2",
        "--out", dir.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = last_line(&o);
    let table = fs::read_to_string(run.join("table.txt")).unwrap();
    assert!(table.starts_with("ACC(%)\tAUC(%)\tSEN(%)\tSPE(%)\n"));
    assert!(table.contains('±'));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("cv_report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);
    assert_eq!(report["std_kind"], "population");
    assert_eq!(report["predictions"].as_array().unwrap().len(), 40);

    let o = brainho(&[
        "interpret",
        "--checkpoint", run.join("fold0/checkpoint.bin").to_str().unwrap(),
        "--data", manifest.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--set", "data.folds=2",
        "--fold", "0",
        "--out", dir.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = last_line(&o);
    for f in ["soft_assignment.csv", "atlas_overlap.csv", "importance.csv", "subgraph_nodes.csv", "importance.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let soft = fs::read_to_string(out.join("soft_assignment.csv")).unwrap();
    assert_eq!(soft.lines().count(), 1 + 3);
    assert_eq!(soft.lines().next().unwrap().split(',').count(), 1 + 20);
}
