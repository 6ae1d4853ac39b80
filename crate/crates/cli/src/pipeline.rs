//! The five pipeline stages. Each reads its inputs from the output
//! directory (or the config), writes its artifacts there and updates the
//! manifest.

use std::path::{Path, PathBuf};

use cced::detector::{self, Forest, ThresholdPolicy};
use cced::eval::{self, BudgetRow, Confusion, ReportFormat, TimingRow};
use cced::fault::{sample_fault, CleanTrace, RngStream};
use cced::model::{self, ModelSpec, Parameters};
use cced::runtime::{run_with_cced, Disposition, FaultEnvironment, RunOutcome};
use cced::signals::{self, BalancedDataset, CampaignStats, Label};
use cced::trainer::{self, LabeledDataset};
use cced::CcedError;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CampaignConfig, EnvMode, TaskConfig};
use crate::error::{CliError, Result};
use crate::manifest::{unix_now, RunManifest, StageRecord};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MAIN_REPORT_FILE: &str = "main_report.json";
pub const SIGNAL_FILES: [&str; 3] = ["signals_train.jsonl", "signals_val.jsonl", "signals_test.jsonl"];
pub const DETECTOR_FILE: &str = "detector.json";
pub const CALIBRATED_DETECTOR_FILE: &str = "detector_calibrated.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_MD_FILE: &str = "report.md";
pub const PATTERNS_FILE: &str = "patterns.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const RUN_SUMMARY_FILE: &str = "run_summary.json";

/// Inputs timed against the detector.
const TIMING_INPUTS: usize = 100;

/// Independent seeds for each use of the campaign seed.
#[derive(Debug, Clone, Copy)]
enum SeedUse {
    Data,
    Init,
    Campaign,
    Split,
    Forest,
    Run,
}

fn derived_seed(seed: u64, purpose: SeedUse) -> u64 {
    // stream ids far above any trial index
    RngStream::new(seed, u64::MAX - purpose as u64).rng().next_u64()
}

pub struct Task {
    pub train: LabeledDataset,
    pub holdout: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: String,
    pub layer_dims: Vec<usize>,
    pub param_count: usize,
    pub train_size: usize,
    pub holdout_size: usize,
    pub train_accuracy: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSummary {
    pub n_per_class: usize,
    pub stats: CampaignStats,
    /// Sample counts of the train, validation and test files.
    pub split_sizes: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub tree_count: usize,
    pub max_depth: usize,
    pub node_count: usize,
    pub train_samples: usize,
    pub mean_clean_score: f64,
    pub mean_error_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfusion {
    pub operating_point: String,
    pub threshold: f64,
    pub counts: Confusion,
}

/// Everything in `evaluation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub label: String,
    pub budgets: Vec<f64>,
    pub test_clean: usize,
    pub test_error: usize,
    /// Thresholds calibrated on the validation split.
    pub validation_calibrated: BudgetRow,
    /// Thresholds calibrated on the test split itself.
    pub test_calibrated: BudgetRow,
    pub confusion: Vec<NamedConfusion>,
    pub deployed_policy: ThresholdPolicy,
    pub stats: Option<CampaignStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub evaluation: Evaluation,
    pub timing: TimingRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub input: usize,
    pub input_id: usize,
    pub clean_class: Option<usize>,
    #[serde(flatten)]
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispositionCounts {
    pub accepted_first: usize,
    pub corrected_by_rerun: usize,
    pub persistent_flag_ignored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: EnvMode,
    pub threshold: f64,
    pub fp_budget: Option<f64>,
    pub inputs: usize,
    pub mean_inferences: f64,
    pub first_flagged: usize,
    /// Inputs whose first execution disagreed with the fault-free class.
    pub first_wrong: usize,
    pub final_matches_clean: usize,
    pub dispositions: DispositionCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub train: TrainSummary,
    pub signals: SignalSummary,
    pub detector: DetectorSummary,
    pub eval: EvalSummary,
    pub run: RunSummary,
}

/// Collects a stage's artifacts and records them in the manifest.
struct StageWriter<'a> {
    out: &'a Path,
    stage: &'static str,
    started: u64,
    manifest: RunManifest,
}

impl StageWriter<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.record(name, bytes, self.stage);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
        self.write(name, text.as_bytes())
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.stages.push(StageRecord {
            stage: self.stage.to_string(),
            config_hash: self.manifest.config_hash.clone(),
            started_unix: self.started,
            finished_unix: unix_now(),
        });
        self.manifest.save(self.out)
    }
}

pub struct Pipeline {
    pub cfg: CampaignConfig,
}

impl Pipeline {
    pub fn new(cfg: CampaignConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn seed(&self, purpose: SeedUse) -> u64 {
        derived_seed(self.cfg.seed, purpose)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let path = self.artifact(name);
        if !path.is_file() {
            return Err(CliError::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing artifact; run the earlier stage first"),
            ));
        }
        Ok(path)
    }

    fn stage(&self, stage: &'static str) -> Result<StageWriter<'_>> {
        let out = self.out();
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        Ok(StageWriter {
            out,
            stage,
            started: unix_now(),
            manifest: RunManifest::open(out, self.cfg.hash(), self.cfg.seed)?,
        })
    }

    /// Training and held-out inputs, regenerated or read from CSV.
    pub fn load_task(&self) -> Result<Task> {
        let class_count = *self.cfg.model.layer_dims.last().expect("validated");
        let task = match &self.cfg.task {
            TaskConfig::Blobs(b) => {
                let spread = self.cfg.spread().expect("blob task");
                let all = trainer::make_blobs(
                    b.class_count,
                    b.features,
                    b.train_per_class + b.holdout_per_class,
                    spread,
                    self.seed(SeedUse::Data),
                )?;
                let cut = b.class_count * b.train_per_class;
                Task {
                    train: all.slice(0..cut),
                    holdout: all.slice(cut..all.len()),
                }
            }
            TaskConfig::Csv(c) => {
                self.cfg.validate_paths()?;
                let count = Some(c.class_count.unwrap_or(class_count));
                Task {
                    train: trainer::load_csv_dataset(&c.train, count)?,
                    holdout: trainer::load_csv_dataset(&c.holdout, count)?,
                }
            }
        };
        let width = self.cfg.model.layer_dims[0];
        if task.holdout.feature_count() != width || (!task.train.is_empty() && task.train.feature_count() != width) {
            return Err(CliError::config(format!(
                "model.layer_dims: input width {width} does not match the task's {} features",
                task.holdout.feature_count()
            )));
        }
        Ok(task)
    }

    fn load_main(&self) -> Result<(ModelSpec, Parameters)> {
        Ok(model::load_weights(self.require(WEIGHTS_FILE)?)?)
    }

    fn load_split(&self, index: usize) -> Result<BalancedDataset> {
        Ok(signals::load_signals(self.require(SIGNAL_FILES[index])?)?)
    }

    pub fn train_main(&self) -> Result<TrainSummary> {
        self.cfg.validate_paths()?;
        let task = self.load_task()?;
        let (spec, params, mode) = match &self.cfg.model.weights {
            Some(path) => {
                let (spec, params) = model::load_weights(path)?;
                if spec.layer_dims != self.cfg.model.layer_dims {
                    return Err(CliError::config(format!(
                        "model.weights: file has layer dims {:?}, config says {:?}",
                        spec.layer_dims, self.cfg.model.layer_dims
                    )));
                }
                (spec, params, "loaded")
            }
            None => {
                let spec = ModelSpec::new(self.cfg.model.layer_dims.clone())?;
                let params = trainer::train(&spec, &task.train, &self.cfg.train_config(self.seed(SeedUse::Init)))?;
                (spec, params, "trained")
            }
        };
        let train_accuracy = if task.train.is_empty() {
            0.0
        } else {
            trainer::evaluate_accuracy(&spec, &params, &task.train)?
        };
        let summary = TrainSummary {
            mode: mode.to_string(),
            layer_dims: spec.layer_dims.clone(),
            param_count: spec.param_count(),
            train_size: task.train.len(),
            holdout_size: task.holdout.len(),
            train_accuracy,
            accuracy: trainer::evaluate_accuracy(&spec, &params, &task.holdout)?,
        };

        let mut w = self.stage("train-main")?;
        w.write(WEIGHTS_FILE, &model::encode_weights(&spec, &params)?)?;
        w.write_json(MAIN_REPORT_FILE, &summary)?;
        w.manifest.main_accuracy = Some(summary.accuracy);
        w.finish()?;
        Ok(summary)
    }

    pub fn build_signals(&self) -> Result<SignalSummary> {
        let (spec, params) = self.load_main()?;
        let task = self.load_task()?;
        let s = &self.cfg.signals;
        let ds = signals::build_dataset(
            &spec,
            &params,
            &task.holdout,
            s.n_per_class,
            self.seed(SeedUse::Campaign),
            s.max_attempts,
        )?;
        let (train, val, test) = signals::split(&ds, (s.split[0], s.split[1], s.split[2]), self.seed(SeedUse::Split))?;

        let mut w = self.stage("build-signals")?;
        for (name, part) in SIGNAL_FILES.iter().zip([&train, &val, &test]) {
            let mut bytes = Vec::new();
            signals::write_signals(part, &mut bytes).map_err(|e| CliError::io(self.artifact(name), e))?;
            w.write(name, &bytes)?;
        }
        w.finish()?;
        Ok(SignalSummary {
            n_per_class: s.n_per_class,
            stats: ds.stats.unwrap_or_default(),
            split_sizes: [train.len(), val.len(), test.len()],
        })
    }

    pub fn train_detector(&self) -> Result<DetectorSummary> {
        let train = self.load_split(0)?;
        let forest = detector::train_forest(&train, &self.cfg.forest_config(self.seed(SeedUse::Forest)))?;
        let mean = |label: Label| -> Result<f64> {
            let scores = train
                .samples
                .iter()
                .filter(|s| s.label == label)
                .map(|s| forest.score(&s.features))
                .collect::<cced::Result<Vec<f64>>>()?;
            Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
        };
        let summary = DetectorSummary {
            tree_count: forest.trees().len(),
            max_depth: forest.trees().iter().map(|t| t.depth()).max().unwrap_or(0),
            node_count: forest.trees().iter().map(|t| t.node_count()).sum(),
            train_samples: train.len(),
            mean_clean_score: mean(Label::Clean)?,
            mean_error_score: mean(Label::Error)?,
        };

        let mut w = self.stage("train-detector")?;
        w.write(DETECTOR_FILE, detector::forest_to_json(&forest, &ThresholdPolicy::default_rule()).as_bytes())?;
        w.finish()?;
        Ok(summary)
    }

    fn load_detector(&self) -> Result<Forest> {
        Ok(detector::load_forest(self.require(DETECTOR_FILE)?)?.0)
    }

    pub fn evaluate(&self) -> Result<EvalSummary> {
        let forest = self.load_detector()?;
        let val = self.load_split(1)?;
        let test = self.load_split(2)?;
        let label = self.cfg.label();
        let budgets = &self.cfg.budgets;

        let validation_calibrated = eval::detection_table(&label, &forest, &test, &val, budgets)?;
        let test_calibrated =
            eval::detection_table_test_calibrated(&format!("{label} (test-calibrated)"), &forest, &test, budgets)?;
        let deployed = detector::calibrate_threshold(&forest, &val, self.cfg.run.budget)?;
        let default_rule = ThresholdPolicy::default_rule();
        let confusion = [
            ("default".to_string(), default_rule),
            (format!("calibrated at {}%", self.cfg.run.budget * 100.0), deployed),
        ]
        .into_iter()
        .map(|(name, policy)| {
            Ok(NamedConfusion {
                operating_point: name,
                threshold: policy.threshold,
                counts: eval::confusion(&forest, &policy, &test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

        let evaluation = Evaluation {
            label: label.clone(),
            budgets: budgets.clone(),
            test_clean: test.count(Label::Clean),
            test_error: test.count(Label::Error),
            validation_calibrated,
            test_calibrated,
            confusion,
            deployed_policy: deployed,
            stats: test.stats,
        };

        let (spec, params) = self.load_main()?;
        let task = self.load_task()?;
        let n = task.holdout.len().min(TIMING_INPUTS);
        let timing = eval::timing_ratio(&spec, &params, &forest, &task.holdout.features[..n], self.cfg.timing_runs)?;

        let mut w = self.stage("evaluate")?;
        w.write(REPORT_CSV_FILE, render(&evaluation, ReportFormat::Csv).as_bytes())?;
        w.write(REPORT_MD_FILE, render(&evaluation, ReportFormat::Markdown).as_bytes())?;
        w.write(PATTERNS_FILE, eval::pattern_csv(&test).as_bytes())?;
        w.write_json(EVALUATION_FILE, &evaluation)?;
        w.write(CALIBRATED_DETECTOR_FILE, detector::forest_to_json(&forest, &deployed).as_bytes())?;
        // wall-clock numbers, kept apart from the reproducible reports
        w.write_json(TIMING_FILE, &timing)?;
        w.finish()?;
        Ok(EvalSummary { evaluation, timing })
    }

    pub fn run(&self) -> Result<RunSummary> {
        let detector_path = match &self.cfg.run.detector {
            Some(p) => p.clone(),
            None => self.require(CALIBRATED_DETECTOR_FILE)?,
        };
        let (forest, policy) = detector::load_forest(&detector_path)?;
        if !policy.is_calibrated() {
            return Err(CliError::config(format!(
                "run.detector: {} holds an uncalibrated threshold; use the file written by `evaluate`",
                detector_path.display()
            )));
        }
        let (spec, params) = self.load_main()?;
        let task = self.load_task()?;
        let holdout = &task.holdout;
        let mode = self.cfg.run.env;
        let run_seed = self.seed(SeedUse::Run);
        let max_attempts = self.cfg.signals.max_attempts;

        let records = (0..self.cfg.run.inputs)
            .into_par_iter()
            .map(|i| {
                let input_id = i % holdout.len();
                let x = &holdout.features[input_id];
                let trace = CleanTrace::new(&spec, &params, x)?;
                let clean_class = trace.clean().predicted_class;
                let mut stream = RngStream::new(run_seed, i as u64);
                let mut env = match mode {
                    EnvMode::None => FaultEnvironment::None,
                    EnvMode::Transient => FaultEnvironment::Transient(sample_fault(&mut stream, params.len())?),
                    EnvMode::TransientSdc => {
                        FaultEnvironment::Transient(sdc_fault(&trace, &params, &mut stream, input_id, max_attempts)?)
                    }
                    EnvMode::Always => FaultEnvironment::Always(stream),
                };
                let outcome = run_with_cced(&spec, &params, &forest, &policy, x, &mut env)?;
                Ok(OutcomeRecord {
                    input: i,
                    input_id,
                    clean_class,
                    outcome,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut dispositions = DispositionCounts::default();
        for r in &records {
            match r.outcome.disposition {
                Disposition::AcceptedFirst => dispositions.accepted_first += 1,
                Disposition::CorrectedByRerun => dispositions.corrected_by_rerun += 1,
                Disposition::PersistentFlagIgnored => dispositions.persistent_flag_ignored += 1,
            }
        }
        let n = records.len();
        let summary = RunSummary {
            env: mode,
            threshold: policy.threshold,
            fp_budget: policy.fp_budget,
            inputs: n,
            mean_inferences: records.iter().map(|r| r.outcome.inferences_used as f64).sum::<f64>() / n.max(1) as f64,
            first_flagged: records.iter().filter(|r| r.outcome.first_flag).count(),
            first_wrong: records.iter().filter(|r| r.outcome.first_class != r.clean_class).count(),
            final_matches_clean: records.iter().filter(|r| r.outcome.final_class == r.clean_class).count(),
            dispositions,
        };

        let mut lines = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut lines, r).expect("outcome serializes");
            lines.push(b'\n');
        }
        let mut w = self.stage("run")?;
        w.write(OUTCOMES_FILE, &lines)?;
        w.write_json(RUN_SUMMARY_FILE, &summary)?;
        w.finish()?;
        Ok(summary)
    }

    pub fn run_all(&self) -> Result<PipelineSummary> {
        Ok(PipelineSummary {
            train: self.train_main()?,
            signals: self.build_signals()?,
            detector: self.train_detector()?,
            eval: self.evaluate()?,
            run: self.run()?,
        })
    }

    /// Outcome log written by [`Pipeline::run`].
    pub fn load_outcomes(&self) -> Result<Vec<OutcomeRecord>> {
        let path = self.require(OUTCOMES_FILE)?;
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        text.lines()
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| {
                    CliError::Data(CcedError::Parse {
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
            })
            .collect()
    }
}

/// First flip from `stream` that changes the fault-free prediction.
fn sdc_fault(
    trace: &CleanTrace,
    params: &Parameters,
    stream: &mut RngStream,
    input_id: usize,
    max_attempts: usize,
) -> Result<cced::fault::FaultSpec> {
    let clean = trace.clean().predicted_class;
    for _ in 0..max_attempts {
        let fault = sample_fault(stream, params.len())?;
        if trace.faulty(params, fault)?.predicted_class != clean {
            return Ok(fault);
        }
    }
    Err(CliError::Campaign(CcedError::Campaign {
        input_id,
        attempts: max_attempts,
    }))
}

fn render(e: &Evaluation, format: ReportFormat) -> String {
    let rows = [e.validation_calibrated.clone(), e.test_calibrated.clone()];
    let confusion: Vec<(String, Confusion)> = e
        .confusion
        .iter()
        .map(|c| (format!("{} (t={})", c.operating_point, c.threshold), c.counts))
        .collect();
    let table = eval::render_report(&e.budgets, &rows, e.stats.as_ref(), format);
    let matrix = eval::render_confusion(&confusion, format);
    match format {
        ReportFormat::Csv => format!("{table}\n{matrix}"),
        ReportFormat::Markdown => format!(
            "# Detection report: {}\n\n\
             Detection rate on the test split ({} clean, {} error samples). \
             The default column uses score >= 0.5 with its re-computation rate in parentheses; \
             budget columns use thresholds calibrated on the validation split, \
             except the test-calibrated row.\n\n\
             {table}\n## Confusion on the test split\n\n{matrix}",
            e.label, e.test_clean, e.test_error
        ),
    }
}
