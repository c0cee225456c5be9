use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn magnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magnet"))
        .args(args)
        .env("MAGNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON summary on stdout")
}

fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("JSON error record on stderr")
}

fn generate(dir: &Path, seed: &str, nx: &str) -> Value {
    ok(&magnet(&["generate", "--tag", "E1", "--count", "3", "--nx", nx, "--nt", "12", "--seed", seed, "--out", dir.to_str().unwrap()]))
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    let cfg = json!({
        "model": {
            "history": 3, "mlp_layers": 2, "latent_dim": 8, "encoder_hidden": 8, "encoder_steps": 1,
            "interp_hidden": 8, "decoder_hidden": 8, "forecaster_hidden": 8, "forecaster_latent": 8,
            "forecaster_steps": 1, "forecaster_decoder_hidden": 8
        },
        "train": {"parents": 16, "queries": 8, "horizon": 2, "max_epochs": 2, "patience": 2, "val_fraction": 0.0}
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let summary = generate(&a, "4", "32");
    assert_eq!(summary["count"], 3);
    assert_eq!(summary["num_points"], 32);
    generate(&b, "4", "32");
    for f in ["data.bin", "mesh.bin", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_then_eval_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let test_dir = dir.path().join("test");
    generate(&train_dir, "1", "32");
    generate(&test_dir, "2", "64");
    let ckpt = dir.path().join("ckpt");
    let cfg = tiny_config(dir.path());
    let s = ok(&magnet(&[
        "train", "--data", train_dir.to_str().unwrap(), "--variant", "gnn", "--config", &cfg, "--seed", "3",
        "--out", ckpt.to_str().unwrap(),
    ]));
    assert_eq!(s["epochs"], 2);
    assert!(ckpt.join("log.csv").exists());

    let report = dir.path().join("report");
    let s = ok(&magnet(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", test_dir.to_str().unwrap(), "--test-res", "32,64",
        "--mesh", "regular", "--interp", "knn", "--horizon", "4", "--out", report.to_str().unwrap(),
    ]));
    let rows = s["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["model"], "magnet-gnn+knn:2");
    assert_eq!(rows[1]["model"], "persistence");
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(report.join("report_frames.csv").exists());
}

#[test]
fn experiment_command_runs_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.json");
    let tiny: Value = serde_json::from_str(&std::fs::read_to_string(tiny_config(dir.path())).unwrap()).unwrap();
    let cfg = json!({
        "train_data": {"generate": {"tag": "E1", "count": 3, "resolution": 32, "n_t": 12, "seed": 1}},
        "test_data": {"generate": {"tag": "E1", "count": 2, "resolution": 32, "n_t": 12, "seed": 2}},
        "models": [{"name": "tiny", "variant": "gnn", "model": tiny["model"], "train": tiny["train"]}],
        "eval_horizon": 3
    });
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("run");
    let s = ok(&magnet(&["experiment", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(s["rows"], 2);
    assert_eq!(s["failures"], json!([]));
    let again = ok(&magnet(&["experiment", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!((again["trained"].as_u64(), again["evaluated"].as_u64()), (Some(0), Some(0)));
}

#[test]
fn failures_exit_nonzero_with_an_error_record() {
    let out = magnet(&["generate", "--tag", "E9", "--count", "1", "--nx", "8", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["kind"], "usage");

    let out = magnet(&["train", "--data", "/nonexistent/dataset", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "io");
    assert!(rec["error"]["message"].as_str().unwrap().len() > 3);

    let dir = tempfile::tempdir().unwrap();
    let out = magnet(&["generate", "--tag", "E1", "--count", "0", "--nx", "8", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(error_record(&out)["error"]["kind"], "invalid_argument");

    let out = Command::new(env!("CARGO_BIN_EXE_magnet"))
        .args(["generate", "--tag", "E1", "--count", "1", "--nx", "8", "--out", dir.path().to_str().unwrap()])
        .env("MAGNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "invalid_argument");
}
