use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_driftnet");

const CSV_HEADER: &str = "epoch,wall_s,train_loss,valid_acc,inst_per_s,mean_staleness";

fn driftnet(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny_rnn_config(extra_train: &str, tail: &str) -> String {
    format!(
        r#"{{
          "model": {{"family": "rnn", "vocab": 14, "embed": 6, "hidden": 10, "classes": 10}},
          "dataset": {{"kind": "list_reduction", "train": 40, "valid": 12}},
          "train": {{
            "epochs": 2,
            "threads": 2,
            "max_active_keys": 2,
            "optimizer": {{"algo": "sgd", "lr": 0.2}},
            "seed": 5{extra_train}
          }}{tail}
        }}"#
    )
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &tiny_rnn_config("", ""));
    let out = dir.path().join("out");

    let res = driftnet(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );

    let csv = read_lines(&out.join("metrics.csv"));
    assert_eq!(csv[0], CSV_HEADER);
    assert_eq!(csv.len(), 3);
    for line in &csv[1..] {
        assert_eq!(line.split(',').count(), 6);
        for field in line.split(',') {
            field.parse::<f64>().unwrap();
        }
    }

    for line in read_lines(&out.join("events.jsonl")) {
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(v.get("event").is_some());
    }

    let weights: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("weights.json")).unwrap()).unwrap();
    assert!(weights.as_array().is_some_and(|a| !a.is_empty()));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs_run"], 2);

    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["seed"], 5);
}

#[test]
fn flag_overrides_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &tiny_rnn_config("", ""));
    let out = dir.path().join("out");

    let res = driftnet(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "99",
        "--threads",
        "1",
        "--max-active-keys",
        "1",
        "--min-update-frequency",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["seed"], 99);
    assert_eq!(config["train"]["threads"], 1);
    assert_eq!(config["train"]["max_active_keys"], 1);
    assert_eq!(config["train"]["min_update_frequency"], 4);
}

#[test]
fn repeat_emits_run_directories_and_median_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &tiny_rnn_config(",\n            \"target_accuracy\": 0.0", ""),
    );
    let out = dir.path().join("out");

    let res = driftnet(&[
        "train",
        "--config",
        &cfg,
        "--repeat",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );

    for k in 0..3 {
        let run = out.join(format!("run-{k}"));
        assert_eq!(read_lines(&run.join("metrics.csv"))[0], CSV_HEADER);
        let cfg: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap())
                .unwrap();
        assert_eq!(cfg["train"]["seed"], 5 + k);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 3);
    assert_eq!(summary["reached_target"], 3);
    assert_eq!(summary["median_epochs_to_target"], 1.0);
    assert!(summary["median_wall_s_to_target"].as_f64().unwrap() >= 0.0);
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
      "model": {"family": "rnn", "vocab": 14, "embed": 4, "hidden": 6, "classes": 10},
      "dataset": {"kind": "list_reduction", "train": 10, "valid": 5},
      "train": {"epochs": 1, "optimizer": {"algo": "sgd", "lr": 0.1}, "seed": 3}
    }"#;
    let cfg = write_config(dir.path(), "run.json", text);
    let out = dir.path().join("out");

    let res = driftnet(&["gradcheck", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("overall:"), "{stdout}");
    assert!(stdout.contains("ok"), "{stdout}");

    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["blocks"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_emits_one_row_per_grid_cell() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"{{
          "model": {{"family": "rnn", "vocab": 14, "embed": 4, "hidden": 6, "classes": 10}},
          "dataset": {{"kind": "list_reduction", "train": 20, "valid": 8}},
          "train": {{"epochs": 1, "threads": 2, "optimizer": {{"algo": "sgd", "lr": 0.2}}, "seed": 2}},
          "sweep": {{"max_active_keys": [1, 4, 8, 16], "min_update_frequency": [10, 50, 250]}}
        }}"#
    );
    let cfg = write_config(dir.path(), "sweep.json", &text);
    let out = dir.path().join("out");

    let res = driftnet(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );

    let rows = read_lines(&out.join("sweep.csv"));
    assert_eq!(rows[0], "mak,muf,epochs_to_target,wall_s_to_target,inst_per_s");
    assert_eq!(rows.len(), 1 + 12);
    assert!(rows[1].starts_with("1,10,"));
    assert!(rows[12].starts_with("16,250,"));
    for cell in ["mak1-muf10", "mak16-muf250"] {
        assert_eq!(read_lines(&out.join(cell).join("metrics.csv"))[0], CSV_HEADER);
    }
}

#[test]
fn estimate_throughput_reproduces_reference_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "estimate.json",
        r#"{"hidden": 200, "nodes": 30, "edges": 30, "edge_types": 4,
            "steps": 4, "device_flops": 1e12, "overhead": 0.5, "bits_per_scalar": 32}"#,
    );
    let res = driftnet(&["estimate-throughput", "--config", &cfg]);
    assert!(res.status.success());
    let doc: serde_json::Value =
        serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(
        format!("{:.1e}", doc["samples_per_s"].as_f64().unwrap()),
        "6.5e3"
    );
    assert_eq!(
        format!("{:.1e}", doc["bandwidth_bits_per_s"].as_f64().unwrap()),
        "1.2e9"
    );
    assert_eq!(doc["fwdop"].as_f64().unwrap(), 4.8e6);
    assert_eq!(doc["bwdop"].as_f64().unwrap(), 1.44e7);
}

#[test]
fn bad_config_fails_before_any_thread_starts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{
          "model": {"family": "mlp", "input": 4, "hidden": 8, "classes": 2},
          "dataset": {"kind": "list_reduction", "train": 10, "valid": 10},
          "train": {"epochs": 1, "optimizer": {"algo": "sgd", "lr": 0.1}}
        }"#,
    );
    let res = driftnet(&["train", "--config", &cfg]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("dataset kind"), "{stderr}");
}

#[test]
fn missing_dataset_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "mnist.json",
        r#"{
          "model": {"family": "mlp", "input": 784, "hidden": 16, "classes": 10},
          "dataset": {"kind": "mnist",
                      "train_images": "/nonexistent/timg", "train_labels": "/nonexistent/tlab",
                      "valid_images": "/nonexistent/vimg", "valid_labels": "/nonexistent/vlab"},
          "train": {"epochs": 1, "optimizer": {"algo": "sgd", "lr": 0.1}}
        }"#,
    );
    let res = driftnet(&["train", "--config", &cfg]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("timg"), "{stderr}");
}

#[test]
fn replicas_flag_produces_replica_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &tiny_rnn_config("", ""));
    let out = dir.path().join("out");

    let res = driftnet(&[
        "train",
        "--config",
        &cfg,
        "--replicas",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    let weights: Vec<(String, serde_json::Value)> =
        serde_json::from_str(&std::fs::read_to_string(out.join("weights.json")).unwrap()).unwrap();
    let names: Vec<&str> = weights.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.iter().any(|n| n.ends_with("@r0")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with("@r1")), "{names:?}");
}
