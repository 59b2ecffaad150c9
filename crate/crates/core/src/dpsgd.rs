//! The DP-SGD engine.
//!
//! Every step draws a Poisson batch (each example independently with
//! probability `q = B / n`), clips per-example gradients to `C`, averages
//! them over the *expected* batch size `B` and adds Gaussian noise with
//! per-coordinate standard deviation `C * sigma / B`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{MechanismSpec, SpentBudget, DEFAULT_DELTA};
use crate::calibration::{self, DEFAULT_BINS};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{LinearModel, LinearObjective};
use crate::rng::{self, Stream};

/// Which parts of the privatisation are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Clipping and noise.
    Dp,
    /// Plain minibatch SGD.
    NonPrivate,
    /// Clipping with the noise multiplier forced to zero.
    ClipOnly,
    /// Noise without clipping.
    NoiseOnly,
}

impl Mode {
    pub fn clips(self) -> bool {
        matches!(self, Mode::Dp | Mode::ClipOnly)
    }

    pub fn noises(self) -> bool {
        matches!(self, Mode::Dp | Mode::NoiseOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dp => "dp",
            Mode::NonPrivate => "non_private",
            Mode::ClipOnly => "clip_only",
            Mode::NoiseOnly => "noise_only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp" => Ok(Mode::Dp),
            "non_private" => Ok(Mode::NonPrivate),
            "clip_only" => Ok(Mode::ClipOnly),
            "noise_only" => Ok(Mode::NoiseOnly),
            other => Err(Error::invalid(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Expected batch size `B`; the sampling rate is `B / n`.
    pub expected_batch: usize,
    pub learning_rate: f64,
    /// Linear decay of the learning rate to zero over all steps.
    pub lr_decay: bool,
    pub epochs: usize,
    pub mode: Mode,
    pub seed: u64,
    /// `delta` used when reporting the spent budget.
    pub delta: f64,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        Self {
            clip_norm: 0.1,
            noise_multiplier: 1.0,
            expected_batch: 4000,
            learning_rate: 1.0,
            lr_decay: false,
            epochs: 30,
            mode: Mode::Dp,
            seed: 0,
            delta: DEFAULT_DELTA,
        }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::invalid(format!(
                "noise multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if self.expected_batch == 0 {
            return Err(Error::invalid("expected batch size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// Noise multiplier actually applied under the configured mode.
    pub fn effective_sigma(&self) -> f64 {
        if self.mode.noises() {
            self.noise_multiplier
        } else {
            0.0
        }
    }

    /// Step schedule for a dataset of `n` examples.
    pub fn schedule(&self, n: usize) -> Result<Schedule> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let batch = self.expected_batch.min(n);
        let steps_per_epoch = ((n as f64 / batch as f64).round() as u64).max(1);
        Ok(Schedule {
            expected_batch: batch,
            q: batch as f64 / n as f64,
            steps_per_epoch,
            total_steps: steps_per_epoch * self.epochs as u64,
        })
    }

    /// Learning rate at step `t` (0-based) of `total` steps.
    pub fn learning_rate_at(&self, t: u64, total: u64) -> f64 {
        if self.lr_decay {
            self.learning_rate * (1.0 - t as f64 / total as f64)
        } else {
            self.learning_rate
        }
    }

    /// Privacy guarantee of a run with this config over `schedule`.
    pub fn spent_budget(&self, schedule: &Schedule) -> Result<SpentBudget> {
        let sigma = self.effective_sigma();
        if !self.mode.clips() || sigma <= 0.0 {
            return Ok(SpentBudget::NotPrivate);
        }
        let mech = MechanismSpec {
            q: schedule.q,
            sigma,
            steps: schedule.total_steps,
        };
        Ok(SpentBudget::Private(mech.report(self.delta)?))
    }
}

/// Poisson sampling schedule derived from a config and a dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// `B`, capped at the dataset size.
    pub expected_batch: usize,
    pub q: f64,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

/// `grad * min(1, C / ||grad||)`.
pub fn clip_per_example(grad: &[f64], clip_norm: f64) -> Vec<f64> {
    let mut g = grad.to_vec();
    clip_in_place(&mut g, clip_norm);
    g
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn clip_in_place(grad: &mut [f64], clip_norm: f64) {
    let mut norm = l2(grad);
    // rounding in the rescale can leave the norm a few ulps above the bound
    let mut shrink = 1.0;
    while norm > clip_norm {
        let scale = clip_norm / norm * shrink;
        grad.iter_mut().for_each(|v| *v *= scale);
        norm = l2(grad);
        shrink -= f64::EPSILON * 4.0;
    }
}

/// Privatised mean gradient of one step: the (clipped) gradients summed in
/// index order, divided by the expected batch size, plus Gaussian noise.
///
/// `dim` is needed because a Poisson batch can be empty.
pub fn noisy_update(
    per_example_grads: &[Vec<f64>],
    dim: usize,
    cfg: &DpSgdConfig,
    noise: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    for g in per_example_grads {
        if g.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: g.len(),
            });
        }
        scratch.copy_from_slice(g);
        if cfg.mode.clips() {
            clip_in_place(&mut scratch, cfg.clip_norm);
        }
        sum.iter_mut().zip(&scratch).for_each(|(s, v)| *s += v);
    }
    let divisor = cfg.expected_batch as f64;
    let std = cfg.clip_norm * cfg.effective_sigma() / divisor;
    for s in sum.iter_mut() {
        *s /= divisor;
        if std > 0.0 {
            *s += std * noise.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(sum)
}

/// A sum of per-example losses over a fixed set of examples.
pub trait Objective: Sync {
    fn num_examples(&self) -> usize;
    fn num_params(&self) -> usize;
    /// Loss of example `index` at `params`; its gradient goes into `grad`.
    fn loss_grad(&self, params: &[f64], index: usize, grad: &mut [f64]) -> f64;
    /// Constraint projection applied after every update.
    fn project(&self, _params: &mut [f64]) {}
}

/// Parameters and accounting of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub params: Vec<f64>,
    pub schedule: Schedule,
    pub budget: SpentBudget,
}

/// Runs DP-SGD on `objective` from `init`. `on_epoch(epoch, params)` is
/// called after every completed epoch (1-based).
pub fn optimize<O: Objective>(
    objective: &O,
    init: Vec<f64>,
    cfg: &DpSgdConfig,
    mut on_epoch: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let n = objective.num_examples();
    let dim = objective.num_params();
    if init.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: init.len(),
        });
    }
    let schedule = cfg.schedule(n)?;
    let step_cfg = DpSgdConfig {
        expected_batch: schedule.expected_batch,
        ..cfg.clone()
    };

    let mut sampler = rng::stream(cfg.seed, Stream::Sampling);
    let mut noise = rng::stream(cfg.seed, Stream::Noise);
    let mut params = init;
    let mut t = 0u64;
    for epoch in 1..=cfg.epochs {
        for _ in 0..schedule.steps_per_epoch {
            let batch = poisson_batch(&mut sampler, n, schedule.q);
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = vec![0.0; dim];
                    let loss = objective.loss_grad(&params, i, &mut g);
                    (loss, g)
                })
                .collect();
            if results.iter().any(|(loss, _)| !loss.is_finite()) {
                return Err(Error::TrainingFailure { epoch });
            }
            let grads: Vec<Vec<f64>> = results.into_iter().map(|(_, g)| g).collect();
            let direction = noisy_update(&grads, dim, &step_cfg, &mut noise)?;
            let lr = cfg.learning_rate_at(t, schedule.total_steps);
            params.iter_mut().zip(&direction).for_each(|(p, d)| *p -= lr * d);
            objective.project(&mut params);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingFailure { epoch });
            }
            t += 1;
        }
        on_epoch(epoch, &params)?;
    }

    let budget = cfg.spent_budget(&schedule)?;
    Ok(RunOutcome {
        params,
        schedule,
        budget,
    })
}

fn poisson_batch(rng: &mut ChaCha12Rng, n: usize, q: f64) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

/// Per-epoch training and evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub train_ece: f64,
    pub eval_ece: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    /// One JSON object per line, one line per epoch.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LinearModel,
    pub trace: TrainTrace,
    pub budget: SpentBudget,
    pub schedule: Schedule,
}

/// Trains a softmax-linear model with DP-SGD, recording a trace entry per
/// epoch on the training data and on `eval_data`.
pub fn train(model: &LinearModel, data: &Dataset, cfg: &DpSgdConfig, eval_data: &Dataset) -> Result<TrainOutcome> {
    if data.is_empty() || eval_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for d in [data, eval_data] {
        if d.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                actual: d.dim(),
            });
        }
        if d.num_classes() != model.num_classes() {
            return Err(Error::invalid(format!(
                "model has {} classes, dataset has {}",
                model.num_classes(),
                d.num_classes()
            )));
        }
    }

    let objective = LinearObjective::for_dataset(data);
    let (k, dim) = (model.num_classes(), model.dim());
    let mut trace = TrainTrace::default();
    let outcome = optimize(&objective, model.params().to_vec(), cfg, |epoch, params| {
        let current =
            LinearModel::from_params(k, dim, params.to_vec()).map_err(|_| Error::TrainingFailure { epoch })?;
        let train_loss = current.mean_loss(data)?;
        let eval_loss = current.mean_loss(eval_data)?;
        if !(train_loss.is_finite() && eval_loss.is_finite()) {
            return Err(Error::TrainingFailure { epoch });
        }
        let train_report = calibration::evaluate(&current, None, data, DEFAULT_BINS)?;
        let eval_report = calibration::evaluate(&current, None, eval_data, DEFAULT_BINS)?;
        trace.records.push(EpochRecord {
            epoch,
            train_loss,
            eval_loss,
            train_ece: train_report.ece,
            eval_ece: eval_report.ece,
            eval_acc: eval_report.accuracy,
        });
        Ok(())
    })?;

    Ok(TrainOutcome {
        model: LinearModel::from_params(k, dim, outcome.params)?,
        trace,
        budget: outcome.budget,
        schedule: outcome.schedule,
    })
}
