use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cced_cli::manifest::{sha256_hex, RunManifest, MANIFEST_FILE};
use serde_json::{json, Value};
use tempfile::TempDir;

/// A small blob task that runs the whole pipeline in well under a second.
fn small_config() -> Value {
    json!({
        "seed": 5,
        "task": {"kind": "blobs", "class_count": 4, "features": 16, "train_per_class": 100, "holdout_per_class": 100},
        "model": {"layer_dims": [16, 32, 4], "train": {"epochs": 10}},
        "signals": {"n_per_class": 100},
        "forest": {"tree_count": 20},
        "run": {"inputs": 100},
        "timing_runs": 20
    })
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(patch: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        merge(&mut cfg, patch);
        std::fs::write(dir.path().join("config.json"), cfg.to_string()).unwrap();
        Workspace { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("config.json")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cced(&self, args: &[&str], out: &str) -> Output {
        Command::new(env!("CARGO_BIN_EXE_cced"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(self.out(out))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str], out: &str) -> String {
        let o = self.cced(args, out);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn json(&self, out: &str, file: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.out(out).join(file)).unwrap()).unwrap()
    }
}

fn code_and_stderr(o: &Output) -> (i32, String) {
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .filter(|(name, _)| name != MANIFEST_FILE && name != "timing.json")
        .collect();
    out.sort();
    out
}

#[test]
fn pipeline_writes_every_artifact_into_the_manifest() {
    let ws = Workspace::new(json!({}));
    ws.ok(&["pipeline"], "out");
    let dir = ws.out("out");
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    let manifest: RunManifest = serde_json::from_str(&text).unwrap();
    assert!(manifest.mismatches(&dir).is_empty());
    let on_disk: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    assert_eq!(on_disk.len(), manifest.artifacts.len());
    for name in on_disk {
        let entry = &manifest.artifacts[&name];
        assert_eq!(entry.sha256, sha256_hex(&std::fs::read(dir.join(&name)).unwrap()));
    }
    let stages: Vec<&str> = manifest.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, ["train-main", "build-signals", "train-detector", "evaluate", "run"]);
    assert!(manifest.main_accuracy.unwrap() > 0.9);
}

#[test]
fn reruns_and_thread_counts_give_identical_artifacts() {
    let ws = Workspace::new(json!({}));
    ws.ok(&["pipeline", "--threads", "1"], "a");
    ws.ok(&["pipeline", "--threads", "3"], "b");
    assert_eq!(files(&ws.out("a")), files(&ws.out("b")));

    // regenerating the reports from the same artifacts changes nothing
    let before = std::fs::read(ws.out("a").join("report.md")).unwrap();
    ws.ok(&["evaluate"], "a");
    assert_eq!(std::fs::read(ws.out("a").join("report.md")).unwrap(), before);
}

#[test]
fn seed_flag_overrides_the_config() {
    let ws = Workspace::new(json!({}));
    ws.ok(&["train-main"], "a");
    ws.ok(&["train-main", "--seed", "6"], "b");
    let read = |d: &str| std::fs::read(ws.out(d).join("weights.bin")).unwrap();
    assert_ne!(read("a"), read("b"));
    assert_eq!(ws.json("b", MANIFEST_FILE)["seed"], 6);
}

#[test]
fn splits_follow_the_configured_fractions() {
    let ws = Workspace::new(json!({}));
    ws.ok(&["train-main"], "out");
    let stdout = ws.ok(&["build-signals"], "out");
    assert!(stdout.contains("[100, 40, 60]"), "{stdout}");
    // the first line of each file is the campaign stats header
    let lines = |f: &str| std::fs::read_to_string(ws.out("out").join(f)).unwrap().lines().count() - 1;
    assert_eq!(lines("signals_train.jsonl"), 100);
    assert_eq!(lines("signals_val.jsonl"), 40);
    assert_eq!(lines("signals_test.jsonl"), 60);
}

#[test]
fn full_budget_detects_everything() {
    let ws = Workspace::new(json!({"budgets": [1.0]}));
    ws.ok(&["pipeline"], "out");
    let eval = ws.json("out", "evaluation.json");
    let point = &eval["validation_calibrated"]["detection_at"][0];
    assert_eq!(point["detection"], 1.0);
    assert_eq!(point["recomputation"], 1.0);
}

#[test]
fn untrained_model_is_near_chance() {
    // the default ten-class task; a small random net on a narrow task can
    // still separate well-spaced blobs
    let ws = Workspace::new(json!({
        "task": {"class_count": 10, "features": 784, "train_per_class": 10, "holdout_per_class": 200},
        "model": {"layer_dims": [784, 128, 10], "train": {"epochs": 0}}
    }));
    ws.ok(&["train-main"], "out");
    let acc = ws.json("out", "main_report.json")["accuracy"].as_f64().unwrap();
    assert!((acc - 0.1).abs() < 0.05, "accuracy {acc} with ten classes");
}

#[test]
fn fault_free_run_never_changes_the_class() {
    let ws = Workspace::new(json!({}));
    ws.ok(&["pipeline"], "out");
    let summary = ws.json("out", "run_summary.json");
    assert_eq!(summary["final_matches_clean"], 100);
    let flagged = summary["first_flagged"].as_f64().unwrap();
    assert!((summary["mean_inferences"].as_f64().unwrap() - (1.0 + flagged / 100.0)).abs() < 1e-12);

    ws.ok(&["run", "--env", "transient-sdc", "--inputs", "200"], "out");
    let outcomes = std::fs::read_to_string(ws.out("out").join("outcomes.jsonl")).unwrap();
    let mut flagged = 0;
    for line in outcomes.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert_ne!(r["first_class"], r["clean_class"]);
        if r["first_flag"] == true {
            flagged += 1;
            assert_eq!(r["final_class"], r["clean_class"]);
        }
    }
    assert!(flagged > 150, "{flagged} of 200 flagged");
}

#[test]
fn missing_weights_file_is_a_config_error() {
    let ws = Workspace::new(json!({"model": {"weights": "nope.bin"}}));
    let (code, err) = code_and_stderr(&ws.cced(&["train-main"], "out"));
    assert_eq!(code, 2);
    assert!(err.contains("model.weights"), "{err}");
}

#[test]
fn bad_fields_name_their_path() {
    let ws = Workspace::new(json!({"budgets": [0.1, 1.5]}));
    let (code, err) = code_and_stderr(&ws.cced(&["train-main"], "out"));
    assert_eq!(code, 2);
    assert!(err.contains("budgets[1]"), "{err}");

    let ws = Workspace::new(json!({"forest": {"trees": 3}}));
    let (code, err) = code_and_stderr(&ws.cced(&["train-main"], "out"));
    assert_eq!(code, 2);
    assert!(err.contains("forest"), "{err}");
}

#[test]
fn uncalibrated_detector_cannot_run() {
    let ws = Workspace::new(json!({}));
    ws.ok(&["train-main"], "out");
    ws.ok(&["build-signals"], "out");
    ws.ok(&["train-detector"], "out");
    let detector = ws.out("out").join("detector.json");
    let (code, err) = code_and_stderr(&ws.cced(&["run", "--detector", detector.to_str().unwrap()], "out"));
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("uncalibrated"), "{err}");
}

#[test]
fn missing_artifacts_are_io_errors() {
    let ws = Workspace::new(json!({}));
    let (code, err) = code_and_stderr(&ws.cced(&["evaluate"], "out"));
    assert_eq!(code, 3);
    assert!(err.contains("detector.json"), "{err}");
}

#[test]
fn exhausted_campaign_is_a_campaign_error() {
    let ws = Workspace::new(json!({"signals": {"max_attempts": 1}}));
    ws.ok(&["train-main"], "out");
    let (code, _) = code_and_stderr(&ws.cced(&["build-signals"], "out"));
    assert_eq!(code, 4);
}

#[test]
fn loaded_weights_must_match_the_layer_dims() {
    let ws = Workspace::new(json!({}));
    ws.ok(&["train-main"], "out");
    let other = Workspace::new(json!({
        "task": {"features": 8},
        "model": {"layer_dims": [8, 32, 4], "weights": ws.out("out").join("weights.bin")}
    }));
    let (code, err) = code_and_stderr(&other.cced(&["train-main"], "out"));
    assert_eq!(code, 2);
    assert!(err.contains("layer dims"), "{err}");
}
