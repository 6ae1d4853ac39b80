//! Campaign configuration. Every field has a default, so `{}` is the strong
//! blob recipe.

use std::path::{Path, PathBuf};

use cced::detector::ForestConfig;
use cced::eval::DEFAULT_BUDGETS;
use cced::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Strong,
    Weak,
}

impl Preset {
    /// Blob spread that gives the preset's accuracy band on the default task.
    pub fn spread(self) -> f32 {
        match self {
            Preset::Strong => 0.2,
            Preset::Weak => 0.34,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Strong => "strong",
            Preset::Weak => "weak",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsTask {
    pub class_count: usize,
    pub features: usize,
    pub train_per_class: usize,
    pub holdout_per_class: usize,
    /// Falls back to the preset's spread.
    pub spread: Option<f32>,
}

impl Default for BlobsTask {
    fn default() -> Self {
        Self {
            class_count: 10,
            features: 784,
            train_per_class: 300,
            holdout_per_class: 200,
            spread: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub train: PathBuf,
    pub holdout: PathBuf,
    #[serde(default)]
    pub class_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskConfig {
    Blobs(BlobsTask),
    Csv(CsvTask),
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Blobs(BlobsTask::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_dims: Vec<usize>,
    /// Load these weights instead of training.
    pub weights: Option<PathBuf>,
    pub train: TrainSection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layer_dims: vec![784, 128, 10],
            weights: None,
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    pub n_per_class: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub max_attempts: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            n_per_class: 2000,
            split: [0.5, 0.2, 0.3],
            max_attempts: 100_000,
        }
    }
}

/// Forest hyperparameters. The seed comes from the campaign seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    pub tree_count: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestSection {
    fn default() -> Self {
        let d = ForestConfig::default();
        Self {
            tree_count: d.tree_count,
            max_depth: d.max_depth,
            min_samples_split: d.min_samples_split,
            features_per_split: d.features_per_split,
            bootstrap: d.bootstrap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    None,
    /// One random flip on the first execution of each input.
    Transient,
    /// Like `transient`, but the flip is resampled until it changes the class.
    TransientSdc,
    /// A fresh random flip on every execution.
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Recomputation budget the deployed threshold is calibrated for.
    pub budget: f64,
    pub env: EnvMode,
    pub inputs: usize,
    /// Detector file for `run`; defaults to the calibrated one in the output directory.
    pub detector: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            budget: 0.10,
            env: EnvMode::None,
            inputs: 1000,
            detector: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub preset: Preset,
    /// Row label in reports; defaults to the preset name.
    pub label: Option<String>,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub signals: SignalConfig,
    pub forest: ForestSection,
    pub budgets: Vec<f64>,
    pub run: RunConfig,
    pub timing_runs: usize,
    pub out_dir: PathBuf,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            preset: Preset::Strong,
            label: None,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            signals: SignalConfig::default(),
            forest: ForestSection::default(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            run: RunConfig::default(),
            timing_runs: 1000,
            out_dir: PathBuf::from("cced-out"),
        }
    }
}

fn ensure(ok: bool, field: &str, msg: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(format!("{field}: {msg}")))
    }
}

fn ensure_file(path: &Path, field: &str) -> Result<()> {
    ensure(path.is_file(), field, format_args!("file not found: {}", path.display()))
}

impl CampaignConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                CliError::config(e.into_inner().to_string())
            } else {
                CliError::config(format!("{path}: {}", e.into_inner()))
            }
        })
    }

    /// Read a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TaskConfig::Csv(csv) = &mut self.task {
            fix(&mut csv.train);
            fix(&mut csv.holdout);
        }
        if let Some(w) = &mut self.model.weights {
            fix(w);
        }
        if let Some(d) = &mut self.run.detector {
            fix(d);
        }
        fix(&mut self.out_dir);
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.preset.name().to_string())
    }

    pub fn spread(&self) -> Option<f32> {
        match &self.task {
            TaskConfig::Blobs(b) => Some(b.spread.unwrap_or(self.preset.spread())),
            TaskConfig::Csv(_) => None,
        }
    }

    pub fn forest_config(&self, seed: u64) -> ForestConfig {
        let f = &self.forest;
        ForestConfig {
            tree_count: f.tree_count,
            max_depth: f.max_depth,
            min_samples_split: f.min_samples_split,
            features_per_split: f.features_per_split,
            bootstrap: f.bootstrap,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.model.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed,
        }
    }

    /// Checks that do not need any file to exist.
    pub fn validate(&self) -> Result<()> {
        let dims = &self.model.layer_dims;
        ensure(dims.len() >= 2, "model.layer_dims", "needs at least input and output widths")?;
        ensure(dims.iter().all(|d| *d > 0), "model.layer_dims", "widths must be positive")?;
        if let TaskConfig::Blobs(b) = &self.task {
            ensure(b.class_count >= 2, "task.class_count", "needs at least two classes")?;
            ensure(b.features > 0, "task.features", "must be positive")?;
            ensure(b.train_per_class > 0, "task.train_per_class", "must be positive")?;
            ensure(b.holdout_per_class > 0, "task.holdout_per_class", "must be positive")?;
            if let Some(s) = b.spread {
                ensure(s.is_finite() && s >= 0.0, "task.spread", "must be a finite non-negative number")?;
            }
            ensure(
                dims[0] == b.features,
                "model.layer_dims",
                format_args!("input width {} does not match task.features {}", dims[0], b.features),
            )?;
            ensure(
                dims[dims.len() - 1] == b.class_count,
                "model.layer_dims",
                format_args!(
                    "output width {} does not match task.class_count {}",
                    dims[dims.len() - 1],
                    b.class_count
                ),
            )?;
        }
        let t = &self.model.train;
        ensure(t.batch_size > 0, "model.train.batch_size", "must be positive")?;
        ensure(
            t.learning_rate.is_finite() && t.learning_rate > 0.0,
            "model.train.learning_rate",
            "must be a positive number",
        )?;
        let s = &self.signals;
        ensure(s.max_attempts > 0, "signals.max_attempts", "must be positive")?;
        ensure(
            s.split.iter().all(|f| f.is_finite() && *f >= 0.0) && (s.split.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            "signals.split",
            "fractions must be non-negative and sum to 1",
        )?;
        ensure(self.forest.tree_count > 0, "forest.tree_count", "must be positive")?;
        ensure(self.forest.features_per_split != Some(0), "forest.features_per_split", "must be positive")?;
        ensure(!self.budgets.is_empty(), "budgets", "must not be empty")?;
        for (i, b) in self.budgets.iter().enumerate() {
            ensure(*b > 0.0 && *b <= 1.0, &format!("budgets[{i}]"), format_args!("{b} is outside (0, 1]"))?;
        }
        ensure(
            self.budgets.windows(2).all(|w| w[0] < w[1]),
            "budgets",
            "must be strictly ascending",
        )?;
        ensure(
            self.run.budget > 0.0 && self.run.budget <= 1.0,
            "run.budget",
            format_args!("{} is outside (0, 1]", self.run.budget),
        )?;
        ensure(self.timing_runs > 0, "timing_runs", "must be positive")?;
        Ok(())
    }

    /// Checks that referenced input files exist.
    pub fn validate_paths(&self) -> Result<()> {
        if let TaskConfig::Csv(csv) = &self.task {
            ensure_file(&csv.train, "task.train")?;
            ensure_file(&csv.holdout, "task.holdout")?;
        }
        if let Some(w) = &self.model.weights {
            ensure_file(w, "model.weights")?;
        }
        Ok(())
    }

    /// Stable digest of the effective configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
