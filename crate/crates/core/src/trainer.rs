//! Synthetic classification tasks and plain SGD training of the main model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CcedError, Result};
use crate::model::{self, forward, ModelSpec, Parameters};
use crate::numerics;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(CcedError::shape(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= class_count) {
            return Err(CcedError::domain(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            features: self.features[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            class_count: self.class_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CcedError::domain("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CcedError::domain("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Gaussian clusters around seeded random unit-norm class means.
///
/// Samples are interleaved by class (`0, 1, .., k-1, 0, 1, ..`), so every
/// prefix of `m * class_count` rows is balanced.
pub fn make_blobs(
    class_count: usize,
    features: usize,
    samples_per_class: usize,
    spread: f32,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count < 2 {
        return Err(CcedError::domain("make_blobs needs at least two classes"));
    }
    if features == 0 {
        return Err(CcedError::domain("make_blobs needs at least one feature"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(CcedError::domain("spread must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f32>> = (0..class_count)
        .map(|_| {
            let v: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| (x / norm) as f32).collect()
        })
        .collect();

    let n = class_count * samples_per_class;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..samples_per_class {
        for (class, mean) in means.iter().enumerate() {
            let x = mean
                .iter()
                .map(|m| m + spread * rng.sample::<f32, _>(StandardNormal))
                .collect();
            xs.push(x);
            ys.push(class);
        }
    }
    LabeledDataset::new(xs, ys, class_count)
}

/// Reads `f0,..,fn,label` rows. With `class_count` unset, the class count is
/// one more than the largest label seen.
pub fn load_csv_dataset(path: impl AsRef<Path>, class_count: Option<usize>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CcedError::io(path, e))?;
    parse_csv_dataset(&text, class_count)
}

pub fn parse_csv_dataset(text: &str, class_count: Option<usize>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header_len = reader
        .headers()
        .map_err(|e| CcedError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .len();
    if header_len < 2 {
        if text.trim().is_empty() {
            return Err(CcedError::EmptyDataset("CSV file has no rows".into()));
        }
        return Err(CcedError::Parse {
            line: 1,
            message: "header needs at least one feature column and a label column".into(),
        });
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CcedError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header_len {
            return Err(CcedError::Parse {
                line,
                message: format!("expected {header_len} fields, found {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(header_len - 1);
        for field in record.iter().take(header_len - 1) {
            let v: f32 = field.parse().map_err(|_| CcedError::Parse {
                line,
                message: format!("non-numeric feature {field:?}"),
            })?;
            row.push(v);
        }
        let label_field = &record[header_len - 1];
        let label: usize = label_field.parse().map_err(|_| CcedError::Parse {
            line,
            message: format!("label {label_field:?} is not a non-negative integer"),
        })?;
        if let Some(k) = class_count {
            if label >= k {
                return Err(CcedError::Parse {
                    line,
                    message: format!("label {label} out of range for {k} classes"),
                });
            }
        }
        xs.push(row);
        ys.push(label);
    }
    if ys.is_empty() {
        return Err(CcedError::EmptyDataset("CSV file has no data rows".into()));
    }
    let k = class_count.unwrap_or_else(|| ys.iter().max().unwrap() + 1);
    LabeledDataset::new(xs, ys, k)
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::zeros(spec);
    let layout = params.layout().to_vec();
    let buf = params.buffer_mut();
    for l in layout {
        let s = (6.0 / (l.cols + l.rows) as f64).sqrt() as f32;
        for w in &mut buf[l.weight_offset..l.bias_offset] {
            *w = rng.gen_range(-s..s);
        }
    }
    params
}

fn check_shapes(spec: &ModelSpec, data: &LabeledDataset) -> Result<()> {
    spec.validate()?;
    if !data.is_empty() && data.feature_count() != spec.input_dim() {
        return Err(CcedError::shape(format!(
            "model takes {} features, dataset has {}",
            spec.input_dim(),
            data.feature_count()
        )));
    }
    if data.class_count != spec.class_count() {
        return Err(CcedError::shape(format!(
            "model has {} classes, dataset has {}",
            spec.class_count(),
            data.class_count
        )));
    }
    Ok(())
}

/// Mean cross-entropy over `rows` and its gradient with respect to every
/// entry of the flat parameter buffer.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &Parameters,
    data: &LabeledDataset,
    rows: &[usize],
) -> Result<(f64, Vec<f32>)> {
    let mut grad = vec![0.0f32; params.len()];
    let mut loss = 0.0f64;
    let last = spec.layer_count() - 1;
    for &i in rows {
        let acts = model::activations(spec, params, &data.features[i])?;
        let probs = numerics::softmax(&acts[last + 1])?;
        let label = data.labels[i];
        loss -= (probs[label] as f64).max(f64::MIN_POSITIVE).ln();

        let mut delta: Vec<f32> = probs;
        delta[label] -= 1.0;
        for layer in (0..=last).rev() {
            let l = params.layout()[layer];
            let input = &acts[layer];
            for (r, d) in delta.iter().enumerate() {
                let row = &mut grad[l.weight_offset + r * l.cols..l.weight_offset + (r + 1) * l.cols];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[l.bias_offset + r] += d;
            }
            if layer == 0 {
                break;
            }
            let w = params.weights(layer);
            let mut prev = vec![0.0f32; l.cols];
            for (r, d) in delta.iter().enumerate() {
                for (p, wv) in prev.iter_mut().zip(w.row(r)) {
                    *p += wv * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    let n = rows.len().max(1) as f32;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / rows.len().max(1) as f64, grad))
}

/// Minibatch SGD on softmax cross-entropy. Returns the trained parameters
/// and the mean training loss of each epoch.
pub fn train_with_history(
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Parameters, Vec<f64>)> {
    cfg.validate()?;
    check_shapes(spec, data)?;
    let mut params = init_params(spec, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = loss_and_gradient(spec, &params, data, batch)?;
            epoch_loss += loss * batch.len() as f64;
            for (p, g) in params.buffer_mut().iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        history.push(epoch_loss / data.len().max(1) as f64);
    }
    Ok((params, history))
}

pub fn train(spec: &ModelSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Parameters> {
    train_with_history(spec, data, cfg).map(|(p, _)| p)
}

/// Fraction of rows whose prediction equals the label. Degenerate
/// predictions count as wrong.
pub fn evaluate_accuracy(spec: &ModelSpec, params: &Parameters, data: &LabeledDataset) -> Result<f64> {
    check_shapes(spec, data)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, y) in data.features.iter().zip(&data.labels) {
        if forward(spec, params, x)?.predicted_class == Some(*y) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
