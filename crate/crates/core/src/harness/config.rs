use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::DEFAULT_DELTA;
use crate::calibration::DEFAULT_BINS;
use crate::dpsgd::{DpSgdConfig, Mode};
use crate::error::{Error, Result};

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Two-dimensional Gaussian mixture, regenerated per seed.
    Synthetic { n: usize, n_test: usize },
    /// Feature CSV files. Without a test file, `test_fraction` of the
    /// training file is held out per seed.
    Features {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n: 10_000,
            n_test: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for TargetBudget {
    fn default() -> Self {
        Self {
            epsilon: 8.0,
            delta: DEFAULT_DELTA,
        }
    }
}

/// Recalibration stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecalSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub lr_decay: bool,
    /// Expected batch size on the recalibration split (capped at its size).
    pub expected_batch: usize,
}

impl Default for RecalSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.1,
            clip_norm: 10.0,
            lr_decay: true,
            expected_batch: 200,
        }
    }
}

/// One JSON file fully determines one experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Base optimiser settings; mode, seed and noise are set per arm.
    pub train: DpSgdConfig,
    pub target: TargetBudget,
    /// Derive each private arm's noise multiplier from `target`. When false,
    /// `train.noise_multiplier` is used as given.
    pub calibrate_noise: bool,
    pub validation_ratio: f64,
    pub bins: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub clip_norms: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub corruption: Vec<f64>,
    pub recal: RecalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train: DpSgdConfig {
                clip_norm: 0.1,
                noise_multiplier: 1.0,
                expected_batch: 4000,
                learning_rate: 2.0,
                lr_decay: false,
                epochs: 50,
                mode: Mode::Dp,
                seed: 0,
                delta: DEFAULT_DELTA,
            },
            target: TargetBudget::default(),
            calibrate_noise: true,
            validation_ratio: 0.1,
            bins: DEFAULT_BINS,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            clip_norms: vec![0.1, 1.0, 10.0],
            epsilons: vec![1.0, 3.0, 8.0, 16.0],
            corruption: vec![0.6, 0.8],
            recal: RecalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.bins == 0 {
            return Err(Error::invalid("bin count must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_ratio) {
            return Err(Error::invalid("validation ratio must lie in [0, 1)"));
        }
        if !(self.target.epsilon > 0.0) || !(self.target.delta > 0.0 && self.target.delta < 1.0) {
            return Err(Error::invalid("target budget needs epsilon > 0 and delta in (0, 1)"));
        }
        if let DataSource::Features { test_fraction, .. } = &self.data {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(Error::invalid("test fraction must lie in (0, 1)"));
            }
        }
        if self.corruption.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("corruption probabilities must lie in [0, 1]"));
        }
        if self.clip_norms.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::invalid("clip norms must be > 0"));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("sweep epsilons must be > 0"));
        }
        let train = DpSgdConfig {
            delta: self.target.delta,
            ..self.train.clone()
        };
        train.validate()
    }
}
