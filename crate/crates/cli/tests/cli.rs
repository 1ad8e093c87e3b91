use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "seed": 5,
  "images": 3,
  "split": [0.34, 0.33, 0.33],
  "synth": {"width": 40, "height": 40, "channels": 6, "saturated_blobs": 1, "dark_blobs": 1,
            "vessels": 0, "impostor_blobs": 0},
  "tiling": {"target_pixels_per_tile": 64},
  "cnn_train": {"epochs": 2, "learning_rate": 0.02, "cnn": {"patch_size": 16}},
  "gnn_train": {"epochs": 2, "learning_rate": 0.02, "cnn": {"patch_size": 16}},
  "models": ["CNN_g", "GNN_aW"]
}"#;

fn hsiseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsiseg"))
        .current_dir(dir)
        .env_remove("HSISEG_RUN_ROOT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = hsiseg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap_or("null")).unwrap_or(Value::Null)
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.json"), SMALL).unwrap();
    let v = ok(tmp.path(), &["--config", "small.json", "synth", "--out", "data"]);
    assert_eq!(v["images"], 3);
    (tmp, PathBuf::from("data/manifest.json"))
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.clone(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn commands_chain_from_synth_to_render() {
    let (tmp, manifest) = setup();
    let d = tmp.path();
    let inputs = snapshot(&d.join("data"));
    let cfg = ["--config", "small.json"];
    let with = |rest: &[&str]| -> Vec<String> { cfg.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| {
        let args = with(rest);
        ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let sam = run(&["tile", "--cube", "data/img_000.hsc", "--labels", "data/img_000.labels", "--distance", "sam", "--out", "t/sam.tiles"]);
    run(&["tile", "--cube", "data/img_000.hsc", "--distance", "l2", "--out", "t/l2.tiles"]);
    assert!(sam["tiles"].as_u64().unwrap() > 5);
    assert_ne!(fs::read(d.join("t/sam.tiles")).unwrap(), fs::read(d.join("t/l2.tiles")).unwrap());

    let q = run(&["quality", "--cube", "data/img_000.hsc", "--tiles", "t/sam.tiles", "--out", "q.jsonl"]);
    let lines = fs::read_to_string(d.join("q.jsonl")).unwrap();
    assert_eq!(lines.lines().count() as u64, sam["tiles"].as_u64().unwrap());
    assert_eq!(q["tiles"], sam["tiles"]);
    for l in lines.lines() {
        let r: Value = serde_json::from_str(l).unwrap();
        let w = r["weight"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&w));
    }

    let m = manifest.to_str().unwrap();
    let t = run(&["train", "--manifest", m, "--model", "GNN_aW", "--out", "run"]);
    assert!(t["epochs_run"].as_u64().unwrap() >= 1);
    for f in ["run/config.json", "run/run_config.json", "run/split.json", "run/history.jsonl"] {
        assert!(d.join(f).exists(), "{f}");
    }

    let inf = run(&["infer", "--run", "run", "--cube", "data/img_001.hsc", "--out", "inf"]);
    let preds: Value = serde_json::from_slice(&fs::read(d.join("inf/predictions.json")).unwrap()).unwrap();
    assert_eq!(preds["predictions"].as_array().unwrap().len() as u64, inf["tiles"].as_u64().unwrap());

    run(&["eval", "--run", "run", "--manifest", m, "--subset", "test", "--out", "metrics.json"]);
    let metrics: Value = serde_json::from_slice(&fs::read(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["images"].as_array().unwrap().len(), 1);
    assert!(metrics["accuracy"]["Avg"].is_number());

    run(&["render", "--cube", "data/img_001.hsc", "--tiles", "inf/tiles.bin", "--predictions", "inf/predictions.json", "--out", "pred.ppm"]);
    run(&["render", "--cube", "data/img_000.hsc", "--tiles", "t/sam.tiles", "--labels", "data/img_000.labels", "--out", "truth.ppm"]);
    let ppm = fs::read(d.join("pred.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n40 40\n255\n"));
    assert_eq!(ppm.len(), 13 + 40 * 40 * 3);

    assert_eq!(snapshot(&d.join("data")), inputs, "inputs were modified");
}

#[test]
fn pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("small.json"), SMALL).unwrap();
    let table = hsiseg(d, &["--config", "small.json", "--seed", "7", "pipeline", "--out", "r1"]);
    assert!(table.status.success(), "{}", String::from_utf8_lossy(&table.stderr));
    assert!(String::from_utf8_lossy(&table.stdout).contains("GNN_aW"));
    ok(d, &["--config", "small.json", "--seed", "7", "--threads", "1", "pipeline", "--out", "r2"]);
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("r1/report.json"), read("r2/report.json"));
    assert_eq!(read("r1/CNN_g/metrics.json"), read("r2/CNN_g/metrics.json"));
    assert_eq!(read("r1/GNN_aW/metrics.json"), read("r2/GNN_aW/metrics.json"));

    // A rerun into a finished directory resumes and reproduces the report.
    let before = read("r1/report.json");
    ok(d, &["--config", "small.json", "--seed", "7", "pipeline", "--out", "r1"]);
    assert_eq!(read("r1/report.json"), before);

    // The saved configuration reproduces the run on its own.
    ok(d, &["--config", "r1/run_config.json", "pipeline", "--out", "r3"]);
    assert_eq!(read("r3/report.json"), before);
}

#[test]
fn exit_codes() {
    let (tmp, _) = setup();
    let d = tmp.path();
    let code = |args: &[&str]| hsiseg(d, args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["tile"]), 1);
    assert_eq!(code(&["tile", "--cube", "data/img_000.hsc", "--tiling.nope", "1"]), 1);
    assert_eq!(code(&["tile", "--cube", "data/img_000.hsc", "--tiling.max_iters"]), 1);
    assert_eq!(code(&["tile", "--cube", "missing.hsc"]), 2);
    assert_eq!(code(&["tile", "--cube", "data/manifest.json"]), 2);
    assert_eq!(code(&["infer", "--run", "nowhere", "--cube", "data/img_000.hsc"]), 2);
    assert_eq!(
        code(&[
            "--config", "small.json", "train", "--manifest", "data/manifest.json", "--model", "CNN_a",
            "--out", "nan", "--cnn_train.learning_rate", "1e30",
        ]),
        3
    );
}

#[test]
fn run_root_env_and_json_logs() {
    let (tmp, _) = setup();
    let d = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_hsiseg"))
        .current_dir(d)
        .env("HSISEG_RUN_ROOT", d.join("root"))
        .args(["--config", "small.json", "--seed", "9", "synth"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("root/synth-9/manifest.json").exists());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(!stderr.trim().is_empty());
    for line in stderr.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["level"].is_string() && v["msg"].is_string());
    }
    let cfg: Value = serde_json::from_slice(&fs::read(d.join("root/synth-9/run_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["synth"]["width"], 40);
}
