use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lacmfer"))
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A config with a short run, written into `dir`.
fn short_config(dir: &Path, iters: usize) -> PathBuf {
    let text = fs::read_to_string(default_config()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["total_iters"] = iters.into();
    v["data"]["samples_per_class"] = 30.into();
    v["data"]["eval_samples_per_class"] = 20.into();
    let path = dir.join("short.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn default_pipeline_runs_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    let cfg = default_config();

    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let files: Vec<_> = fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.iter().filter(|f| f.to_string_lossy().ends_with(".lacmfer")).count(), 8);
    assert!(data.join("config.json").exists());

    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir)]);
    for f in ["config.json", "model.ckpt", "diagnostics.jsonl", "metrics.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run_dir.join("diagnostics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2000);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    let shipped: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(resolved, shipped);

    let ckpt = run_dir.join("model.ckpt");
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(report["target_geometry"]["ratio_r"].is_number());

    let csv = tmp.path().join("emb.csv");
    ok(&["export", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&csv)]);
    let rows = lacmfer::eval::load_embeddings(&csv).unwrap();
    assert_eq!(rows.len(), 8 * 5 * 100);
    assert!(rows.iter().all(|r| r.features.len() == 64));
}

#[test]
fn negative_alpha_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"alpha": -0.1}"#).unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn malformed_data_is_a_parse_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    fs::write(
        data.join("domain0_train.lacmfer"),
        "#lacmfer-v1 input_dim=2 K=5 domain=0 role=source split=train\n0,1.0\n",
    )
    .unwrap();
    let out = run(&["train", "--config", s(&default_config()), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("domain0_train.lacmfer:2:"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn grad_check_passes_on_default_config() {
    let out = ok(&["grad-check", "--config", s(&default_config())]);
    let table = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 13);
    for row in rows {
        let err: f64 = row.split_whitespace().nth(4).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{row}");
    }
}

#[test]
fn rerunning_the_resolved_config_is_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = short_config(tmp.path(), 60);
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let first = tmp.path().join("first");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&first)]);
    let second = tmp.path().join("second");
    let resolved = first.join("config.json");
    ok(&["train", "--config", s(&resolved), "--data", s(&data), "--out", s(&second)]);
    for f in ["config.json", "model.ckpt", "diagnostics.jsonl", "metrics.json"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn ablate_writes_a_report_keyed_by_variant_and_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = short_config(tmp.path(), 20);
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let out_dir = tmp.path().join("ablation");
    ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--seeds",
        "0,1,2",
        "--out",
        s(&out_dir),
        "--pseudo-sweep",
    ]);
    assert!(out_dir.join("config.json").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    for label in ["A", "B", "C", "D", "E", "F", "F:pseudo=spl", "F:pseudo=voting"] {
        for seed in ["0", "1", "2"] {
            assert!(report["runs"][label][seed]["accuracy"].is_number(), "{label}/{seed}");
        }
    }
    let two_seeds = run(&[
        "ablate", "--config", s(&cfg), "--data", s(&data), "--seeds", "0,1", "--out", s(&out_dir),
    ]);
    assert_eq!(two_seeds.status.code(), Some(2));
}
