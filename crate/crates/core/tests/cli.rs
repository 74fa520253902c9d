use std::path::Path;
use std::process::{Command, Output};

use imbal_core::data::{gen_gaussian_mixture, load_csv};
use imbal_core::harness::{aggregate_file_name, checkpoint_file_name, trial_file_name, ExperimentConfig};

fn imbal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imbal")).args(args).output().expect("binary runs")
}

fn small_config(seeds: &str) -> String {
    format!(
        r#"{{
  "dataset": {{"kind": "gaussian", "n_classes": 3, "n_train_per_class": 40, "n_test_per_class": 20, "mean_radius": 3.0, "sigma": 0.5}},
  "r_train": 0.25,
  "train": {{"epochs": 3, "warmup_epochs": 1, "batch_size": 16}},
  "seeds": {seeds}
}}"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_writes_reports_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "cfg.json", &small_config("[0, 1]"));
    let out = dir.path().join("run");
    let o = imbal(&["train", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let hash = ExperimentConfig::load(Path::new(&cfg_path)).unwrap().hash();
    for seed in [0, 1] {
        assert!(out.join(trial_file_name(&hash, seed)).exists());
        assert!(out.join(checkpoint_file_name(&hash, seed)).exists());
    }
    assert!(out.join(aggregate_file_name(&hash)).exists());

    let data = dir.path().join("points.csv");
    gen_gaussian_mixture(3, 30, 2, 3.0, 0.5, 9).unwrap().write_csv(&data, "label").unwrap();
    let ckpt = out.join(checkpoint_file_name(&hash, 0));
    let grid = dir.path().join("grid.csv");
    let o = imbal(&[
        "boundary",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--resolution",
        "20",
        "--out",
        grid.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&grid).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x0,x1,pred_label,max_prob");
    assert_eq!(text.lines().count(), 1 + 20 * 20);
    let margins: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(margins["median"].as_f64().unwrap() >= 0.0);

    let o = imbal(&["collapse", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let agreement = report["ncc_agreement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&agreement));
}

#[test]
fn curate_subsamples_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    gen_gaussian_mixture(4, 100, 2, 2.0, 1.0, 1).unwrap().write_csv(&input, "label").unwrap();
    let output = dir.path().join("out.csv");
    let o = imbal(&[
        "curate",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--ratio",
        "0.1",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_csv(&output, "label").unwrap().counts(), vec![100, 46, 22, 10]);
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "cfg.json", &small_config("[0, 1]"));
    let out = dir.path().join("sweep");
    let o = imbal(&[
        "sweep",
        "--config",
        &cfg_path,
        "--axis",
        "batch_size",
        "--values",
        "8,16",
        "--baseline",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("sweep.json").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = small_config("[0]").replacen("\"seeds\"", "\"learning_rate\": 1, \"seeds\"", 1);
    for (name, text) in [("unknown.json", unknown), ("empty.json", small_config("[]"))] {
        let p = write(dir.path(), name, &text);
        let o = imbal(&["train", "--config", &p, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = imbal(&[
        "collapse",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}
