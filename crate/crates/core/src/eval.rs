//! Detection-rate-vs-budget tables, confusion counts, timing and report
//! rendering.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{calibrate_on_scores, Forest, ThresholdPolicy};
use crate::error::{CcedError, Result};
use crate::model::{forward, ModelSpec, Parameters};
use crate::signals::{check_features, BalancedDataset, CampaignStats, Label};

pub const DEFAULT_BUDGETS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];
/// Soft-vote analogue of an untuned binary classifier's decision.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Detector scores of one dataset, split by label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub clean: Vec<f64>,
    pub error: Vec<f64>,
}

impl ScoredSet {
    pub fn new(forest: &Forest, ds: &BalancedDataset) -> Result<Self> {
        let mut set = ScoredSet::default();
        for s in &ds.samples {
            let score = forest.score(&s.features)?;
            match s.label {
                Label::Clean => set.clean.push(score),
                Label::Error => set.error.push(score),
            }
        }
        Ok(set)
    }

    /// Fraction of error samples flagged at `threshold`.
    pub fn detection(&self, threshold: f64) -> f64 {
        flag_rate(&self.error, threshold)
    }

    /// Fraction of clean samples flagged at `threshold`.
    pub fn recomputation(&self, threshold: f64) -> f64 {
        flag_rate(&self.clean, threshold)
    }
}

fn flag_rate(scores: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|s| **s >= threshold).count() as f64 / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: f64,
    pub threshold: f64,
    /// Clean flag rate on the calibration set.
    pub achieved_fp: f64,
    pub detection: f64,
    /// Clean flag rate on the test set.
    pub recomputation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub label: String,
    pub default_detection: f64,
    pub default_recomp: f64,
    pub detection_at: Vec<BudgetPoint>,
}

impl BudgetRow {
    pub fn detection_for(&self, budget: f64) -> Option<f64> {
        self.detection_at
            .iter()
            .find(|p| (p.budget - budget).abs() < 1e-12)
            .map(|p| p.detection)
    }

    pub fn point_for(&self, budget: f64) -> Option<&BudgetPoint> {
        self.detection_at.iter().find(|p| (p.budget - budget).abs() < 1e-12)
    }
}

/// Calibrate on `calibration_clean` per budget, measure on `test`.
pub fn detection_row_from_scores(
    label: &str,
    calibration_clean: &[f64],
    test: &ScoredSet,
    budgets: &[f64],
) -> Result<BudgetRow> {
    if test.clean.is_empty() && test.error.is_empty() {
        return Err(CcedError::domain("empty test partition"));
    }
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(CcedError::domain("budgets must be sorted ascending"));
    }
    let detection_at = budgets
        .iter()
        .map(|&budget| {
            let policy = calibrate_on_scores(calibration_clean, budget)?;
            Ok(BudgetPoint {
                budget,
                threshold: policy.threshold,
                achieved_fp: policy.achieved_fp.unwrap_or_default(),
                detection: test.detection(policy.threshold),
                recomputation: test.recomputation(policy.threshold),
            })
        })
        .collect::<Result<_>>()?;
    Ok(BudgetRow {
        label: label.to_string(),
        default_detection: test.detection(DEFAULT_THRESHOLD),
        default_recomp: test.recomputation(DEFAULT_THRESHOLD),
        detection_at,
    })
}

/// Thresholds calibrated on `val`, rates measured on `test`.
pub fn detection_table(
    label: &str,
    forest: &Forest,
    test: &BalancedDataset,
    val: &BalancedDataset,
    budgets: &[f64],
) -> Result<BudgetRow> {
    if test.is_empty() {
        return Err(CcedError::domain("empty test partition"));
    }
    let val_scores = ScoredSet::new(forest, val)?;
    let test_scores = ScoredSet::new(forest, test)?;
    detection_row_from_scores(label, &val_scores.clean, &test_scores, budgets)
}

/// Thresholds shifted on the test set itself.
pub fn detection_table_test_calibrated(
    label: &str,
    forest: &Forest,
    test: &BalancedDataset,
    budgets: &[f64],
) -> Result<BudgetRow> {
    if test.is_empty() {
        return Err(CcedError::domain("empty test partition"));
    }
    let test_scores = ScoredSet::new(forest, test)?;
    detection_row_from_scores(label, &test_scores.clean, &test_scores, budgets)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn confusion(forest: &Forest, policy: &ThresholdPolicy, ds: &BalancedDataset) -> Result<Confusion> {
    let mut c = Confusion::default();
    for s in &ds.samples {
        let flagged = policy.flags(forest.score(&s.features)?);
        match (s.label, flagged) {
            (Label::Error, true) => c.tp += 1,
            (Label::Error, false) => c.fn_ += 1,
            (Label::Clean, true) => c.fp += 1,
            (Label::Clean, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub main_ms: f64,
    pub detector_ms: f64,
    pub ratio: f64,
    pub n_runs: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

fn batch_sizes(n_runs: usize) -> Vec<usize> {
    let n_runs = n_runs.max(1);
    let batches = n_runs.min(10);
    (0..batches)
        .map(|b| n_runs / batches + usize::from(b < n_runs % batches))
        .collect()
}

fn timed_batch(start_index: usize, size: usize, call: &mut impl FnMut(usize)) -> f64 {
    let start = Instant::now();
    for i in start_index..start_index + size {
        call(i);
    }
    start.elapsed().as_secs_f64() * 1e3 / size as f64
}

/// Median over 10 batches of the mean wall-clock milliseconds per call,
/// after `warmup` untimed calls.
pub fn time_per_call(n_runs: usize, warmup: usize, mut call: impl FnMut(usize)) -> f64 {
    for i in 0..warmup {
        call(i);
    }
    let mut done = 0;
    let means = batch_sizes(n_runs)
        .into_iter()
        .map(|size| {
            let m = timed_batch(done, size, &mut call);
            done += size;
            m
        })
        .collect();
    median(means)
}

/// [`time_per_call`] for two workloads, alternating their batches so that
/// both see the same machine conditions.
pub fn time_pair(
    n_runs: usize,
    warmup: usize,
    mut first: impl FnMut(usize),
    mut second: impl FnMut(usize),
) -> (f64, f64) {
    for i in 0..warmup {
        first(i);
        second(i);
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut done = 0;
    for size in batch_sizes(n_runs) {
        a.push(timed_batch(done, size, &mut first));
        b.push(timed_batch(done, size, &mut second));
        done += size;
    }
    (median(a), median(b))
}

/// Mean clean forward time against mean forest score time over the same
/// inputs. Single-threaded by construction.
pub fn timing_ratio(
    spec: &ModelSpec,
    params: &Parameters,
    forest: &Forest,
    sample_inputs: &[Vec<f32>],
    n_runs: usize,
) -> Result<TimingRow> {
    if sample_inputs.is_empty() {
        return Err(CcedError::domain("timing needs at least one input"));
    }
    let n_runs = n_runs.max(1);
    let signals = sample_inputs
        .iter()
        .map(|x| forward(spec, params, x).map(|r| check_features(&r)))
        .collect::<Result<Vec<_>>>()?;
    if signals[0].len() != forest.feature_count() {
        return Err(CcedError::shape("forest and model disagree on the class count"));
    }
    let n = sample_inputs.len();
    let (main_ms, detector_ms) = time_pair(
        n_runs,
        10,
        |i| {
            black_box(forward(spec, params, black_box(&sample_inputs[i % n])).ok());
        },
        |i| {
            black_box(forest.score_unchecked(black_box(&signals[i % n])));
        },
    );
    Ok(TimingRow {
        main_ms,
        detector_ms,
        ratio: main_ms / detector_ms.max(f64::MIN_POSITIVE),
        n_runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn budget_header(b: f64) -> String {
    let p = b * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

/// Budget table plus an optional campaign-statistics footer. Percentages
/// carry one decimal in both formats.
pub fn render_report(
    budgets: &[f64],
    rows: &[BudgetRow],
    stats: Option<&CampaignStats>,
    format: ReportFormat,
) -> String {
    let mut out = String::new();
    let cell = |row: &BudgetRow, b: f64| row.detection_for(b).map_or_else(|| "-".to_string(), pct);
    match format {
        ReportFormat::Csv => {
            out.push_str("label,default_detection,default_recomp");
            for b in budgets {
                let _ = write!(out, ",detection_at_{}", budget_header(*b));
            }
            out.push('\n');
            for row in rows {
                let _ = write!(
                    out,
                    "{},{},{}",
                    csv_field(&row.label),
                    pct(row.default_detection),
                    pct(row.default_recomp)
                );
                for b in budgets {
                    let _ = write!(out, ",{}", cell(row, *b));
                }
                out.push('\n');
            }
            if let Some(s) = stats {
                out.push_str("\nstat,value\n");
                for (k, v) in stat_pairs(s) {
                    let _ = writeln!(out, "{k},{v}");
                }
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Main model | default (re-comp) |");
            for b in budgets {
                let _ = write!(out, " {}% |", budget_header(*b));
            }
            out.push_str("\n|---|---|");
            for _ in budgets {
                out.push_str("---|");
            }
            out.push('\n');
            for row in rows {
                let _ = write!(
                    out,
                    "| {} | {}% ({}%) |",
                    row.label,
                    pct(row.default_detection),
                    pct(row.default_recomp)
                );
                for b in budgets {
                    let _ = write!(out, " {}% |", cell(row, *b));
                }
                out.push('\n');
            }
            if let Some(s) = stats {
                out.push_str("\n## Campaign statistics\n\n| stat | value |\n|---|---|\n");
                for (k, v) in stat_pairs(s) {
                    let _ = writeln!(out, "| {k} | {v} |");
                }
            }
        }
    }
    out
}

fn stat_pairs(s: &CampaignStats) -> [(&'static str, u64); 4] {
    [
        ("flips_attempted", s.flips_attempted),
        ("flips_masked", s.flips_masked),
        ("flips_sdc", s.flips_sdc),
        ("flips_degenerate", s.flips_degenerate),
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Confusion counts per labelled operating point.
pub fn render_confusion(entries: &[(String, Confusion)], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("operating_point,tp,fp,tn,fn\n");
            for (name, c) in entries {
                let _ = writeln!(out, "{},{},{},{},{}", csv_field(name), c.tp, c.fp, c.tn, c.fn_);
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| operating point | tp | fp | tn | fn |\n|---|---|---|---|---|\n");
            for (name, c) in entries {
                let _ = writeln!(out, "| {name} | {} | {} | {} | {} |", c.tp, c.fp, c.tn, c.fn_);
            }
        }
    }
    out
}

/// Softmax patterns behind the clean/error comparison plots: mean
/// descending-sorted signal per label (degenerate samples excluded), then
/// the first raw example of each label.
pub fn pattern_csv(ds: &BalancedDataset) -> String {
    let width = ds.feature_count();
    let mut out = String::from("pattern");
    for i in 0..width {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    for label in [Label::Clean, Label::Error] {
        let mut sum = vec![0.0f64; width];
        let mut n = 0usize;
        for s in ds.samples.iter().filter(|s| s.label == label && !s.degenerate) {
            let mut sorted = s.features.clone();
            sorted.sort_unstable_by(|a, b| b.total_cmp(a));
            for (acc, v) in sum.iter_mut().zip(sorted) {
                *acc += v as f64;
            }
            n += 1;
        }
        let _ = write!(out, "mean_sorted_{label}");
        for v in sum {
            let _ = write!(out, ",{}", v / n.max(1) as f64);
        }
        out.push('\n');
    }
    for label in [Label::Clean, Label::Error] {
        if let Some(s) = ds.samples.iter().find(|s| s.label == label && !s.degenerate) {
            let _ = write!(out, "example_{label}");
            for v in &s.features {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}
