//! Balanced clean/error check-signal datasets.
//!
//! Error samples come from transient faults that change the predicted class
//! (silent data corruptions). Masked flips are resampled and only counted.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CcedError, Result};
use crate::fault::{sample_fault, CleanTrace, FaultSpec, RngStream};
use crate::model::{InferenceResult, ModelSpec, Parameters};
use crate::trainer::LabeledDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Clean,
    Error,
}

impl Label {
    pub fn is_error(self) -> bool {
        self == Label::Error
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Clean => "clean",
            Label::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    /// Softmax check signal; all zeros when `degenerate`.
    pub features: Vec<f32>,
    pub label: Label,
    pub input_id: usize,
    pub fault: Option<FaultSpec>,
    pub clean_class: usize,
    /// `None` when the faulted output was degenerate (NaN).
    pub observed_class: Option<usize>,
    pub degenerate: bool,
}

impl SignalSample {
    pub fn is_error(&self) -> bool {
        self.label.is_error()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub flips_attempted: u64,
    pub flips_masked: u64,
    pub flips_sdc: u64,
    pub flips_degenerate: u64,
}

impl CampaignStats {
    pub fn is_consistent(&self) -> bool {
        self.flips_attempted == self.flips_masked + self.flips_sdc + self.flips_degenerate
    }

    fn merge(mut self, other: Self) -> Self {
        self.flips_attempted += other.flips_attempted;
        self.flips_masked += other.flips_masked;
        self.flips_sdc += other.flips_sdc;
        self.flips_degenerate += other.flips_degenerate;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BalancedDataset {
    pub samples: Vec<SignalSample>,
    pub stats: Option<CampaignStats>,
}

impl BalancedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn features(&self) -> Vec<Vec<f32>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn error_flags(&self) -> Vec<bool> {
        self.samples.iter().map(SignalSample::is_error).collect()
    }

    pub fn feature_count(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }
}

/// Degenerate check signals are replaced by this all-zero sentinel.
pub fn degenerate_features(len: usize) -> Vec<f32> {
    vec![0.0; len]
}

/// Detector input for an inference: the check signal, or the zero sentinel
/// when the output is degenerate.
pub fn check_features(result: &InferenceResult) -> Vec<f32> {
    if result.is_degenerate() {
        degenerate_features(result.check_signal.len())
    } else {
        result.check_signal.clone()
    }
}

fn clean_class_of(trace: &CleanTrace, input_id: usize) -> Result<usize> {
    trace.clean().predicted_class.ok_or_else(|| {
        CcedError::domain(format!("fault-free inference on input {input_id} is degenerate"))
    })
}

struct Trial {
    sample: SignalSample,
    stats: CampaignStats,
}

fn run_trial(
    spec: &ModelSpec,
    params: &Parameters,
    inputs: &LabeledDataset,
    seed: u64,
    trial: usize,
    max_attempts: usize,
) -> Result<Trial> {
    let input_id = trial % inputs.len();
    let trace = CleanTrace::new(spec, params, &inputs.features[input_id])?;
    let clean_class = clean_class_of(&trace, input_id)?;
    let mut rng = RngStream::new(seed, trial as u64);
    let mut stats = CampaignStats::default();
    for _ in 0..max_attempts {
        let fault = sample_fault(&mut rng, params.len())?;
        let result = trace.faulty(params, fault)?;
        stats.flips_attempted += 1;
        let degenerate = match result.predicted_class {
            None => {
                stats.flips_degenerate += 1;
                true
            }
            Some(c) if c != clean_class => {
                stats.flips_sdc += 1;
                false
            }
            Some(_) => {
                stats.flips_masked += 1;
                continue;
            }
        };
        let features = if degenerate {
            degenerate_features(spec.class_count())
        } else {
            result.check_signal
        };
        return Ok(Trial {
            sample: SignalSample {
                features,
                label: Label::Error,
                input_id,
                fault: Some(fault),
                clean_class,
                observed_class: result.predicted_class,
                degenerate,
            },
            stats,
        });
    }
    Err(CcedError::Campaign {
        input_id,
        attempts: max_attempts,
    })
}

/// Build `n_per_class` clean and `n_per_class` error samples.
///
/// Sample `i` of each label uses input `i % inputs.len()`. Error trial `i`
/// draws its faults from `RngStream(seed, i)`, so the result does not depend
/// on how trials are scheduled across threads.
pub fn build_dataset(
    spec: &ModelSpec,
    params: &Parameters,
    inputs: &LabeledDataset,
    n_per_class: usize,
    seed: u64,
    max_attempts_per_sample: usize,
) -> Result<BalancedDataset> {
    if n_per_class == 0 {
        return Ok(BalancedDataset {
            samples: Vec::new(),
            stats: Some(CampaignStats::default()),
        });
    }
    if inputs.is_empty() {
        return Err(CcedError::EmptyDataset("no evaluation inputs for the campaign".into()));
    }
    let pairs: Vec<(SignalSample, Trial)> = (0..n_per_class)
        .into_par_iter()
        .map(|i| {
            let input_id = i % inputs.len();
            let trace = CleanTrace::new(spec, params, &inputs.features[input_id])?;
            let clean_class = clean_class_of(&trace, input_id)?;
            let clean = SignalSample {
                features: trace.clean().check_signal.clone(),
                label: Label::Clean,
                input_id,
                fault: None,
                clean_class,
                observed_class: Some(clean_class),
                degenerate: false,
            };
            let trial = run_trial(spec, params, inputs, seed, i, max_attempts_per_sample)?;
            Ok((clean, trial))
        })
        .collect::<Result<_>>()?;

    let mut stats = CampaignStats::default();
    let mut samples = Vec::with_capacity(2 * n_per_class);
    for (clean, trial) in pairs {
        stats = stats.merge(trial.stats);
        samples.push(clean);
        samples.push(trial.sample);
    }
    Ok(BalancedDataset {
        samples,
        stats: Some(stats),
    })
}

/// Stratified seeded split into (train, validation, test).
pub fn split(
    ds: &BalancedDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(BalancedDataset, BalancedDataset, BalancedDataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(f.is_finite() && *f >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CcedError::domain(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<SignalSample>; 3] = Default::default();
    for label in [Label::Clean, Label::Error] {
        let mut group: Vec<&SignalSample> = ds.samples.iter().filter(|s| s.label == label).collect();
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        let n_train = ((a * n) + 1e-9).floor() as usize;
        let n_val = (((b * n) + 1e-9).floor() as usize).min(group.len() - n_train);
        for (i, s) in group.into_iter().enumerate() {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            parts[part].push(s.clone());
        }
    }
    let [mut train, mut val, mut test] = parts;
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let wrap = |samples| BalancedDataset {
        samples,
        stats: ds.stats,
    };
    Ok((wrap(train), wrap(val), wrap(test)))
}

#[derive(Serialize, Deserialize)]
struct Header {
    stats: CampaignStats,
}

pub fn write_signals(ds: &BalancedDataset, mut out: impl Write) -> std::io::Result<()> {
    if let Some(stats) = ds.stats {
        serde_json::to_writer(&mut out, &Header { stats })?;
        out.write_all(b"\n")?;
    }
    for s in &ds.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_signals(text: &str) -> Result<BalancedDataset> {
    let mut ds = BalancedDataset::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| CcedError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        if ds.samples.is_empty() && ds.stats.is_none() && line.contains("\"stats\"") {
            let header: Header = serde_json::from_str(line).map_err(parse_err)?;
            ds.stats = Some(header.stats);
            continue;
        }
        let sample: SignalSample = serde_json::from_str(line).map_err(parse_err)?;
        ds.samples.push(sample);
    }
    Ok(ds)
}

pub fn save_signals(ds: &BalancedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_signals(ds, &mut buf).map_err(|e| CcedError::io(path, e))?;
    fs::write(path, buf).map_err(|e| CcedError::io(path, e))
}

pub fn load_signals(path: impl AsRef<Path>) -> Result<BalancedDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CcedError::io(path, e))?;
    parse_signals(&text)
}
