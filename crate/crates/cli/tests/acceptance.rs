//! Acceptance checks for the whole system, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`):
//! `cargo test -p cced-cli --test acceptance`. Exits non-zero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cced::detector::{best_gini_split, calibrate_threshold, clean_scores, forest_to_json, Forest, ForestConfig, ThresholdPolicy};
use cced::eval::{self, BudgetRow};
use cced::fault::{faulty_forward_by_copy, flip_bit, RngStream};
use cced::model::{load_weights, ModelSpec};
use cced::numerics::{argmax, softmax};
use cced::signals::{build_dataset, load_signals, BalancedDataset, Label};
use cced::trainer::{init_params, loss_and_gradient, make_blobs, LabeledDataset};
use cced_cli::config::{EnvMode, Preset};
use cced_cli::pipeline::{PipelineSummary, SIGNAL_FILES};
use cced_cli::{CampaignConfig, Pipeline};
use rand::Rng;
use serde_json::Value;

const SEEDS: [u64; 3] = [1, 2, 3];
const BUDGETS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

type Check = std::result::Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

/// Runs one criterion and prints its line. A panic counts as a failure.
fn criterion(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    });
    let took = start.elapsed();
    let (pass, detail) = match result {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {took:.1?}, limit {limit:?}")),
        Err(e) => (false, e),
    };
    println!(
        "criterion {id:>2} {} {name} ({:.1}s): {detail}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    pass
}

fn bit_flips() -> Check {
    let mut rng = RngStream::new(101, 0);
    for _ in 0..10_000 {
        let bits: u32 = rng.rng().gen();
        let bit = rng.rng().gen_range(0..32u8);
        let flipped = flip_bit(f32::from_bits(bits), bit);
        if flip_bit(flipped, bit).to_bits() != bits {
            return fail(format!("flip of bit {bit} on {bits:#x} is not an involution"));
        }
        if flipped.to_bits() ^ bits != 1 << bit {
            return fail(format!("flip of bit {bit} on {bits:#x} touched other bits"));
        }
    }
    let analytic = [(31, -1.0f32), (23, 0.5), (30, f32::INFINITY)];
    for (bit, want) in analytic {
        if flip_bit(1.0, bit) != want {
            return fail(format!("1.0 with bit {bit} flipped is {}, want {want}", flip_bit(1.0, bit)));
        }
    }
    Ok("10000 random involution/locality cases, 3 analytic cases".into())
}

/// Independent f64 mean cross-entropy of a [2,3,2] net.
fn loss_f64(p: &[f64], data: &LabeledDataset) -> f64 {
    let mut total = 0.0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let h: Vec<f64> = (0..3)
            .map(|r| (p[2 * r] * x[0] as f64 + p[2 * r + 1] * x[1] as f64 + p[6 + r]).max(0.0))
            .collect();
        let z: Vec<f64> = (0..2)
            .map(|r| (0..3).map(|c| p[9 + 3 * r + c] * h[c]).sum::<f64>() + p[15 + r])
            .collect();
        let m = z[0].max(z[1]);
        total += m + ((z[0] - m).exp() + (z[1] - m).exp()).ln() - z[y];
    }
    total / data.len() as f64
}

fn numerics() -> Check {
    let mut rng = RngStream::new(102, 0);
    for _ in 0..2000 {
        let n = rng.rng().gen_range(1..=512);
        let logits: Vec<f32> = (0..n).map(|_| rng.rng().gen_range(-50.0..50.0)).collect();
        let p = softmax(&logits).map_err(|e| e.to_string())?;
        let sum: f64 = p.iter().map(|v| *v as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return fail(format!("softmax of {n} logits sums to {sum}"));
        }
        let shift: f32 = rng.rng().gen_range(-50.0..50.0);
        let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted).map_err(|e| e.to_string())?;
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-5) {
            return fail(format!("softmax changed under a shift of {shift}"));
        }
    }
    if argmax(&[1.0, 3.0, 3.0, 2.0]).ok() != Some(Some(1)) || argmax(&[f32::NAN, 1.0]).ok() != Some(None) {
        return fail("argmax tie rule or NaN handling broken");
    }

    let spec = ModelSpec::new(vec![2, 3, 2]).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut params = init_params(&spec, seed);
        for (i, v) in params.buffer_mut().iter_mut().enumerate() {
            *v += 0.1 * (i as f32 % 3.0 - 1.0);
        }
        let data = make_blobs(2, 2, 4, 0.5, seed + 1000).map_err(|e| e.to_string())?;
        let p = params.buffer();
        // finite differences are meaningless across a ReLU kink
        let near_kink = data
            .features
            .iter()
            .any(|x| (0..3).any(|r| (p[2 * r] * x[0] + p[2 * r + 1] * x[1] + p[6 + r]).abs() < 1e-2));
        if near_kink {
            continue;
        }
        let rows: Vec<usize> = (0..data.len()).collect();
        let (_, grad) = loss_and_gradient(&spec, &params, &data, &rows).map_err(|e| e.to_string())?;
        let p64: Vec<f64> = p.iter().map(|v| *v as f64).collect();
        let h = 1e-6;
        for i in 0..p64.len() {
            let (mut up, mut down) = (p64.clone(), p64.clone());
            up[i] += h;
            down[i] -= h;
            let numeric = (loss_f64(&up, &data) - loss_f64(&down, &data)) / (2.0 * h);
            let analytic = grad[i] as f64;
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-2);
            worst = worst.max(rel);
        }
        checked += 1;
    }
    if checked < 50 || worst > 1e-3 {
        return fail(format!("gradient check: {checked} models, worst relative error {worst:.2e}"));
    }
    Ok(format!(
        "softmax 2000 cases, argmax ties, gradient on {checked} models (worst rel error {worst:.1e})"
    ))
}

/// Exhaustive midpoint search; the first strict minimum wins.
fn brute_force_split(x: &[Vec<f32>], y: &[bool]) -> Option<(usize, f64)> {
    let gini = |labels: Vec<bool>| {
        let n = labels.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let p = labels.iter().filter(|e| **e).count() as f64 / n;
        n * (1.0 - p * p - (1.0 - p) * (1.0 - p))
    };
    let parent = gini(y.to_vec());
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x[0].len() {
        let mut values: Vec<f64> = x.iter().map(|r| r[f] as f64).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for pair in values.windows(2) {
            let t = (pair[0] + pair[1]) / 2.0;
            let side = |right: bool| -> Vec<bool> {
                (0..x.len()).filter(|&i| ((x[i][f] as f64) >= t) == right).map(|i| y[i]).collect()
            };
            let g = gini(side(false)) + gini(side(true));
            if g < parent - 1e-12 && best.is_none_or(|(b, _, _)| g < b - 1e-12) {
                best = Some((g, f, t));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

fn traverse(json: &Value, x: &[f32]) -> f64 {
    let trees = json["trees"].as_array().expect("trees");
    let total: f64 = trees
        .iter()
        .map(|mut node| {
            while node["kind"] == "split" {
                let f = node["feature"].as_u64().unwrap() as usize;
                let t = node["threshold"].as_f64().unwrap();
                node = if (x[f] as f64) < t { &node["left"] } else { &node["right"] };
            }
            node["error_fraction"].as_f64().unwrap()
        })
        .sum();
    total / trees.len() as f64
}

fn forest_oracles() -> Check {
    let mut rng = RngStream::new(104, 0);
    for case in 0..100 {
        let n = rng.rng().gen_range(2..=30);
        let d = rng.rng().gen_range(1..=3);
        let x: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.rng().gen_range(0..6) as f32 * 0.25).collect())
            .collect();
        let y: Vec<bool> = (0..n).map(|_| rng.rng().gen_bool(0.5)).collect();
        let rows: Vec<usize> = (0..n).collect();
        let features: Vec<usize> = (0..d).collect();
        let got = best_gini_split(&x, &y, &rows, &features).map(|s| (s.feature, s.threshold));
        let want = brute_force_split(&x, &y);
        if got != want {
            return fail(format!("dataset {case}: split {got:?}, exhaustive search {want:?}"));
        }
    }

    let x: Vec<Vec<f32>> = (0..400)
        .map(|i| (0..5).map(|_| rng.rng().gen::<f32>() + if i % 2 == 1 { 0.3 } else { 0.0 }).collect())
        .collect();
    let y: Vec<bool> = (0..400).map(|i| i % 2 == 1).collect();
    let cfg = ForestConfig {
        seed: 9,
        ..ForestConfig::default()
    };
    let forest = Forest::fit(&x, &y, &cfg).map_err(|e| e.to_string())?;
    let json: Value = serde_json::from_str(&forest_to_json(&forest, &ThresholdPolicy::default_rule())).unwrap();
    for i in 0..100 {
        let probe: Vec<f32> = (0..5).map(|_| rng.rng().gen_range(-0.2..1.5)).collect();
        let got = forest.score(&probe).map_err(|e| e.to_string())?;
        let want = traverse(&json, &probe);
        if (got - want).abs() > 1e-12 {
            return fail(format!("input {i}: score {got}, traversal {want}"));
        }
    }
    Ok("100 stumps match exhaustive Gini; 100 scores match traversal".into())
}

fn config(preset: Preset, seed: u64, out: &Path) -> CampaignConfig {
    CampaignConfig {
        preset,
        seed,
        out_dir: out.to_path_buf(),
        ..CampaignConfig::default()
    }
}

fn pipeline(preset: Preset, seed: u64, out: &Path) -> std::result::Result<(Pipeline, PipelineSummary), String> {
    let p = Pipeline::new(config(preset, seed, out)).map_err(|e| e.to_string())?;
    let summary = p.run_all().map_err(|e| format!("{preset:?} seed {seed}: {e}"))?;
    Ok((p, summary))
}

fn detection_at_10(row: &BudgetRow) -> f64 {
    row.detection_for(0.10).unwrap_or(f64::NAN)
}

fn split_file(dir: &Path, i: usize) -> std::result::Result<BalancedDataset, String> {
    load_signals(dir.join(SIGNAL_FILES[i])).map_err(|e| e.to_string())
}

fn sdc_integrity(dir: &Path) -> Check {
    let p = Pipeline::new(config(Preset::Strong, 1, dir)).map_err(|e| e.to_string())?;
    let (spec, params) = load_weights(dir.join("weights.bin")).map_err(|e| e.to_string())?;
    let task = p.load_task().map_err(|e| e.to_string())?;
    let ds = build_dataset(&spec, &params, &task.holdout, 2000, 77, 1_000_000).map_err(|e| e.to_string())?;
    let (clean, errors) = (ds.count(Label::Clean), ds.count(Label::Error));
    if clean != 2000 || errors != 2000 {
        return fail(format!("{clean} clean and {errors} error samples"));
    }
    let mut changed = 0;
    for s in ds.samples.iter().filter(|s| s.label == Label::Error) {
        let x = &task.holdout.features[s.input_id];
        let replay = faulty_forward_by_copy(&spec, &params, x, s.fault.expect("error sample has a fault"))
            .map_err(|e| e.to_string())?;
        if replay.predicted_class != Some(s.clean_class) && replay.predicted_class == s.observed_class {
            changed += 1;
        }
    }
    if changed != errors {
        return fail(format!("only {changed} of {errors} error samples replay to a class change"));
    }
    Ok(format!("2000 + 2000 samples, {changed}/{errors} replays change the class"))
}

fn calibration(dirs: &[PathBuf]) -> Check {
    let mut notes = Vec::new();
    for dir in dirs {
        let forest = cced::detector::load_forest(dir.join("detector.json")).map_err(|e| e.to_string())?.0;
        let val = split_file(dir, 1)?;
        let test = split_file(dir, 2)?;
        let test_clean = test.count(Label::Clean);
        if test_clean < 500 {
            return fail(format!("test split has only {test_clean} clean samples"));
        }
        let val_scores = clean_scores(&forest, &val).map_err(|e| e.to_string())?;
        for b in BUDGETS {
            let policy = calibrate_threshold(&forest, &val, b).map_err(|e| e.to_string())?;
            let fp = val_scores.iter().filter(|s| policy.flags(**s)).count() as f64 / val_scores.len() as f64;
            if fp > b {
                return fail(format!("{}: calibration FP {fp} above budget {b}", dir.display()));
            }
        }
        let row = eval::detection_table("check", &forest, &test, &val, &BUDGETS).map_err(|e| e.to_string())?;
        for w in row.detection_at.windows(2) {
            if w[1].detection < w[0].detection {
                return fail(format!("{}: detection falls from budget {} to {}", dir.display(), w[0].budget, w[1].budget));
            }
        }
        for pt in &row.detection_at {
            if pt.recomputation > pt.budget + 0.02 {
                return fail(format!(
                    "{}: realized recomputation {:.4} at budget {}",
                    dir.display(),
                    pt.recomputation,
                    pt.budget
                ));
            }
        }
        let recomp: Vec<String> = row.detection_at.iter().map(|p| format!("{:.3}", p.recomputation)).collect();
        notes.push(format!("recomp [{}]", recomp.join(", ")));
    }
    Ok(format!("{} campaigns: {}", dirs.len(), notes.join("; ")))
}

fn protocol(dir: &Path) -> Check {
    let mut p = Pipeline::new(config(Preset::Strong, 1, dir)).map_err(|e| e.to_string())?;
    p.cfg.run.env = EnvMode::TransientSdc;
    let mut inputs = 1100;
    let flagged = loop {
        p.cfg.run.inputs = inputs;
        p.run().map_err(|e| e.to_string())?;
        let records = p.load_outcomes().map_err(|e| e.to_string())?;
        let flagged: Vec<_> = records.into_iter().filter(|r| r.outcome.first_flag).collect();
        if flagged.len() >= 1000 || inputs >= 20_000 {
            break flagged;
        }
        inputs *= 2;
    };
    if flagged.len() < 1000 {
        return fail(format!("only {} flagged runs from {inputs} inputs", flagged.len()));
    }
    let corrected = flagged[..1000]
        .iter()
        .filter(|r| r.clean_class.is_some() && r.outcome.final_class == r.clean_class)
        .count();
    if corrected != 1000 {
        return fail(format!("{corrected}/1000 flagged transient runs end on the clean class"));
    }

    p.cfg.run.env = EnvMode::None;
    p.cfg.run.inputs = 2000;
    let summary = p.run().map_err(|e| e.to_string())?;
    if summary.final_matches_clean != summary.inputs {
        return fail(format!(
            "fault-free runs: {} of {} keep their class",
            summary.final_matches_clean, summary.inputs
        ));
    }
    Ok(format!(
        "1000/1000 flagged transient runs corrected; {} fault-free runs unchanged ({} flagged)",
        summary.inputs, summary.first_flagged
    ))
}

fn overhead(dir: &Path) -> Check {
    let p = Pipeline::new(config(Preset::Strong, 1, dir)).map_err(|e| e.to_string())?;
    let (spec, params) = load_weights(dir.join("weights.bin")).map_err(|e| e.to_string())?;
    let forest = cced::detector::load_forest(dir.join("detector.json")).map_err(|e| e.to_string())?.0;
    let task = p.load_task().map_err(|e| e.to_string())?;
    let row = eval::timing_ratio(&spec, &params, &forest, &task.holdout.features[..100], 1000)
        .map_err(|e| e.to_string())?;
    let detail = format!(
        "main {:.4} ms, detector {:.5} ms, ratio {:.1}x",
        row.main_ms, row.detector_ms, row.ratio
    );
    if row.ratio >= 50.0 {
        Ok(detail)
    } else {
        fail(format!("{detail}, below 50x"))
    }
}

/// Files of `dir` except the ones that carry wall-clock values.
fn reproducible_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| e.expect("dir entry").path())
        .filter_map(|path| {
            let name = path.file_name()?.to_string_lossy().into_owned();
            if name == "manifest.json" || name == "timing.json" {
                return None;
            }
            Some((name, std::fs::read(&path).expect("artifact")))
        })
        .collect();
    files.sort();
    files
}

fn determinism(root: &Path) -> Check {
    let dirs = [root.join("a"), root.join("b")];
    for dir in &dirs {
        let out = Command::new(env!("CARGO_BIN_EXE_cced"))
            .args(["pipeline", "--seed", "1", "--out"])
            .arg(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return fail(format!("cced pipeline failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let (a, b) = (reproducible_files(&dirs[0]), reproducible_files(&dirs[1]));
    // everything but the manifest is listed in it
    let manifest: Value = serde_json::from_slice(&std::fs::read(dirs[0].join("manifest.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let listed = manifest["artifacts"].as_object().map_or(0, |m| m.len());
    if a.len() != 13 || listed != 14 {
        return fail(format!("{} reproducible artifacts, {listed} in the manifest", a.len()));
    }
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    if a != b {
        let differing: Vec<&str> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.as_str())
            .collect();
        return fail(format!("artifacts differ: {differing:?}"));
    }
    Ok(format!("{} artifacts byte-identical across two runs: {}", a.len(), names.join(", ")))
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temp dir");
    let root = scratch.path();
    let strong_dir = |s: u64| root.join(format!("strong-{s}"));
    let weak_dir = |s: u64| root.join(format!("weak-{s}"));
    let mut results = Vec::new();

    results.push(criterion(1, "bit-flip correctness", Duration::from_secs(5), bit_flips));
    results.push(criterion(2, "numerics", Duration::from_secs(10), numerics));

    // The strong pipelines feed criteria 3, 5, 8 and 9 as well.
    let mut strong_detection = Vec::new();
    results.push(criterion(6, "strong model detection at 10% budget", Duration::from_secs(300), || {
        let mut notes = Vec::new();
        let mut ok = true;
        for s in SEEDS {
            let (_, summary) = pipeline(Preset::Strong, s, &strong_dir(s))?;
            let acc = summary.train.accuracy;
            let det = detection_at_10(&summary.eval.evaluation.validation_calibrated);
            ok &= acc >= 0.95 && det >= 0.90;
            strong_detection.push(det);
            notes.push(format!("seed {s}: accuracy {acc:.4}, detection {:.1}%", det * 100.0));
        }
        if ok {
            Ok(notes.join("; "))
        } else {
            fail(notes.join("; "))
        }
    }));
    let strong_ready = strong_detection.len() == SEEDS.len();
    let need_strong = |f: &dyn Fn() -> Check| if strong_ready { f() } else { fail("strong pipelines did not finish") };

    results.push(criterion(3, "SDC dataset integrity", Duration::from_secs(120), || {
        need_strong(&|| sdc_integrity(&strong_dir(1)))
    }));
    results.push(criterion(4, "forest oracle equivalence", Duration::from_secs(30), forest_oracles));
    results.push(criterion(5, "calibration contract", Duration::from_secs(60), || {
        need_strong(&|| calibration(&SEEDS.map(strong_dir)))
    }));
    results.push(criterion(7, "weaker main model detects less", Duration::from_secs(300), || {
        need_strong(&|| {
            let mut notes = Vec::new();
            let mut ok = true;
            for (i, s) in SEEDS.into_iter().enumerate() {
                let (_, summary) = pipeline(Preset::Weak, s, &weak_dir(s))?;
                let acc = summary.train.accuracy;
                let det = detection_at_10(&summary.eval.evaluation.validation_calibrated);
                ok &= (0.65..=0.75).contains(&acc) && det < strong_detection[i];
                notes.push(format!(
                    "seed {s}: accuracy {acc:.4}, detection {:.1}% vs strong {:.1}%",
                    det * 100.0,
                    strong_detection[i] * 100.0
                ));
            }
            if ok {
                Ok(notes.join("; "))
            } else {
                fail(notes.join("; "))
            }
        })
    }));
    results.push(criterion(8, "detect and re-run protocol", Duration::from_secs(120), || {
        need_strong(&|| protocol(&strong_dir(1)))
    }));
    results.push(criterion(9, "detector overhead", Duration::from_secs(60), || {
        need_strong(&|| overhead(&strong_dir(1)))
    }));
    results.push(criterion(10, "end-to-end determinism", Duration::from_secs(300), || {
        determinism(&root.join("repeat"))
    }));

    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
