//! Top-label calibration: ECE, reliability diagrams and post-hoc
//! recalibration by temperature or (matrix) Platt scaling.
//!
//! Bins are equal-width on `[0, 1]`. The first bin is closed `[0, 1/M]`, the
//! others are right-closed `((m-1)/M, m/M]`, so a confidence of exactly 1.0
//! falls in the last bin.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accountant::SpentBudget;
use crate::data::Dataset;
use crate::dpsgd::{self, DpSgdConfig, Mode, Objective, Schedule};
use crate::error::{Error, Result};
use crate::models::{top_label, LinearModel, LinearObjective, LogitsBatch};

pub const DEFAULT_BINS: usize = 15;

/// Temperatures are projected onto this interval after every update.
pub const TEMPERATURE_RANGE: (f64, f64) = (1e-2, 1e3);

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction correct; 0 for an empty bin.
    pub acc: f64,
    /// Mean confidence; 0 for an empty bin.
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinStats {
    pub bins: Vec<Bin>,
}

impl BinStats {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `sum_m |B_m| / n * |acc(B_m) - conf(B_m)|`.
    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.acc - b.conf).abs())
            .sum()
    }

    /// Reliability diagram rows: `bin,lo,hi,count,acc,conf`.
    pub fn write_reliability_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "bin,lo,hi,count,acc,conf")?;
        for (m, b) in self.bins.iter().enumerate() {
            writeln!(out, "{m},{},{},{},{},{}", b.lo, b.hi, b.count, b.acc, b.conf)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Confidence histogram rows: `bin,lo,hi,count,fraction`.
    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.total().max(1) as f64;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "bin,lo,hi,count,fraction")?;
        for (m, b) in self.bins.iter().enumerate() {
            writeln!(out, "{m},{},{},{},{}", b.lo, b.hi, b.count, b.count as f64 / n)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Edge `m / M` of an `M`-bin partition of `[0, 1]`.
pub fn bin_edge(m: usize, num_bins: usize) -> f64 {
    m as f64 / num_bins as f64
}

/// Bin holding confidence `c` under the edge convention of this module.
pub fn bin_index(c: f64, num_bins: usize) -> usize {
    let mut m = ((c * num_bins as f64).ceil() as usize)
        .saturating_sub(1)
        .min(num_bins - 1);
    // settle rounding in `c * M` against the exact edge values
    while m > 0 && c <= bin_edge(m, num_bins) {
        m -= 1;
    }
    while m + 1 < num_bins && c > bin_edge(m + 1, num_bins) {
        m += 1;
    }
    m
}

fn check_inputs(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<()> {
    if confidences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            expected: confidences.len(),
            actual: correct.len(),
        });
    }
    if num_bins == 0 {
        return Err(Error::invalid("bin count must be >= 1"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
    }
    Ok(())
}

pub fn reliability_bins(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<BinStats> {
    check_inputs(confidences, correct, num_bins)?;
    let mut counts = vec![0usize; num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let m = bin_index(c, num_bins);
        counts[m] += 1;
        hits[m] += usize::from(ok);
        conf_sum[m] += c;
    }
    let bins = (0..num_bins)
        .map(|m| {
            let (acc, conf) = if counts[m] == 0 {
                (0.0, 0.0)
            } else {
                (hits[m] as f64 / counts[m] as f64, conf_sum[m] / counts[m] as f64)
            };
            Bin {
                lo: bin_edge(m, num_bins),
                hi: bin_edge(m + 1, num_bins),
                count: counts[m],
                acc,
                conf,
            }
        })
        .collect();
    Ok(BinStats { bins })
}

/// Expected calibration error over `num_bins` equal-width bins.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<f64> {
    Ok(reliability_bins(confidences, correct, num_bins)?.ece())
}

/// Top-label confidences and correctness flags of a classifier on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub confidences: Vec<f64>,
    pub correct: Vec<bool>,
}

impl Predictions {
    pub fn report(&self, num_bins: usize) -> Result<CalibrationReport> {
        let bins = reliability_bins(&self.confidences, &self.correct, num_bins)?;
        let n = self.confidences.len() as f64;
        Ok(CalibrationReport {
            ece: bins.ece(),
            accuracy: self.correct.iter().filter(|&&c| c).count() as f64 / n,
            mean_confidence: self.confidences.iter().sum::<f64>() / n,
            bins,
        })
    }

    /// Fraction of examples predicted with confidence at least `threshold`.
    pub fn mass_at_least(&self, threshold: f64) -> f64 {
        let hits = self.confidences.iter().filter(|&&c| c >= threshold).count();
        hits as f64 / self.confidences.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub bins: BinStats,
}

pub fn predictions(model: &LinearModel, recal: Option<&Recalibrator>, data: &Dataset) -> Result<Predictions> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut confidences = Vec::with_capacity(data.len());
    let mut correct = Vec::with_capacity(data.len());
    for ex in data.examples() {
        let mut z = model.logits(&ex.features)?;
        if let Some(r) = recal {
            z = r.apply(&z)?;
        }
        let (class, conf) = top_label(&softmax(&z));
        confidences.push(conf);
        correct.push(class == ex.label);
    }
    Ok(Predictions { confidences, correct })
}

/// Top-label calibration report of `model` (optionally recalibrated) on `data`.
pub fn evaluate(
    model: &LinearModel,
    recal: Option<&Recalibrator>,
    data: &Dataset,
    num_bins: usize,
) -> Result<CalibrationReport> {
    predictions(model, recal, data)?.report(num_bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecalKind {
    Temperature,
    Platt,
}

impl fmt::Display for RecalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecalKind::Temperature => "temperature",
            RecalKind::Platt => "platt",
        })
    }
}

impl FromStr for RecalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(RecalKind::Temperature),
            "platt" => Ok(RecalKind::Platt),
            other => Err(Error::invalid(format!("unknown recalibrator `{other}`"))),
        }
    }
}

/// A map applied to logits before the softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Recalibrator {
    /// `z / T`.
    Temperature { temperature: f64 },
    /// `W z + b` with a `K x K` matrix.
    Platt { map: LinearModel },
}

impl Recalibrator {
    pub fn temperature(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {t}")));
        }
        Ok(Recalibrator::Temperature { temperature: t })
    }

    pub fn platt(map: LinearModel) -> Result<Self> {
        if map.dim() != map.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: map.num_classes(),
                actual: map.dim(),
            });
        }
        Ok(Recalibrator::Platt { map })
    }

    pub fn kind(&self) -> RecalKind {
        match self {
            Recalibrator::Temperature { .. } => RecalKind::Temperature,
            Recalibrator::Platt { .. } => RecalKind::Platt,
        }
    }

    pub fn apply(&self, logits: &[f64]) -> Result<Vec<f64>> {
        match self {
            Recalibrator::Temperature { temperature } => Ok(logits.iter().map(|z| z / temperature).collect()),
            Recalibrator::Platt { map } => map.logits(logits),
        }
    }
}

struct TemperatureObjective<'a> {
    logits: &'a [Vec<f64>],
    labels: &'a [usize],
}

impl Objective for TemperatureObjective<'_> {
    fn num_examples(&self) -> usize {
        self.logits.len()
    }

    fn num_params(&self) -> usize {
        1
    }

    fn loss_grad(&self, params: &[f64], index: usize, grad: &mut [f64]) -> f64 {
        let t = params[0];
        let z = &self.logits[index];
        let y = self.labels[index];
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let lse = log_sum_exp(&scaled);
        // d/dT of lse(z/T) - z_y/T = -(1/T^2) sum_k (p_k - 1[k=y]) z_k
        let mut dot = 0.0;
        for (k, (s, zk)) in scaled.iter().zip(z).enumerate() {
            let r = (s - lse).exp() - if k == y { 1.0 } else { 0.0 };
            dot += r * zk;
        }
        grad[0] = -dot / (t * t);
        lse - scaled[y]
    }

    fn project(&self, params: &mut [f64]) {
        params[0] = params[0].clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1);
    }
}

/// Optimisation settings for recalibration.
#[derive(Debug, Clone, PartialEq)]
pub enum RecalTraining {
    /// DP-SGD with the given config.
    Private(DpSgdConfig),
    /// Full-batch gradient descent.
    NonPrivate {
        epochs: usize,
        learning_rate: f64,
        lr_decay: bool,
    },
}

impl RecalTraining {
    /// Fixed non-private schedule: 100 full-batch epochs at learning rate
    /// 1.0 with linear decay. Without noise the larger step is stable and
    /// reaches the optimum, which 0.1 does not within 100 steps.
    pub fn non_private() -> Self {
        RecalTraining::NonPrivate {
            epochs: 100,
            learning_rate: 1.0,
            lr_decay: true,
        }
    }

    /// Private defaults for a recalibration set of `n` examples: full-batch
    /// DP-SGD, 100 epochs, learning rate 0.1 decayed linearly, clip norm 10.
    pub fn private_defaults(n: usize, noise_multiplier: f64, seed: u64) -> DpSgdConfig {
        DpSgdConfig {
            clip_norm: 10.0,
            noise_multiplier,
            expected_batch: n.max(1),
            learning_rate: 0.1,
            lr_decay: true,
            epochs: 100,
            mode: Mode::Dp,
            seed,
            ..DpSgdConfig::default()
        }
    }

    fn config(&self, n: usize) -> DpSgdConfig {
        match self {
            RecalTraining::Private(cfg) => cfg.clone(),
            RecalTraining::NonPrivate {
                epochs,
                learning_rate,
                lr_decay,
            } => DpSgdConfig {
                mode: Mode::NonPrivate,
                expected_batch: n.max(1),
                epochs: *epochs,
                learning_rate: *learning_rate,
                lr_decay: *lr_decay,
                ..DpSgdConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecalFit {
    pub recalibrator: Recalibrator,
    pub budget: SpentBudget,
    pub schedule: Schedule,
}

/// Fits a recalibrator minimising the log loss of `softmax(g(logits))`.
/// Temperature starts at 1, Platt at the identity map.
pub fn fit_recalibrator(
    kind: RecalKind,
    logits: &LogitsBatch,
    labels: &[usize],
    training: &RecalTraining,
) -> Result<RecalFit> {
    if logits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.len(),
            actual: labels.len(),
        });
    }
    let k = logits.num_classes();
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
    }
    let cfg = training.config(logits.len());
    let no_trace = |_: usize, _: &[f64]| Ok(());

    match kind {
        RecalKind::Temperature => {
            let objective = TemperatureObjective {
                logits: logits.rows(),
                labels,
            };
            let run = dpsgd::optimize(&objective, vec![1.0], &cfg, no_trace)?;
            Ok(RecalFit {
                recalibrator: Recalibrator::temperature(run.params[0])?,
                budget: run.budget,
                schedule: run.schedule,
            })
        }
        RecalKind::Platt => {
            let objective = LinearObjective {
                num_classes: k,
                dim: k,
                inputs: logits.rows().iter().map(Vec::as_slice).collect(),
                labels: labels.to_vec(),
            };
            let init = LinearModel::identity(k).params().to_vec();
            let run = dpsgd::optimize(&objective, init, &cfg, no_trace)?;
            Ok(RecalFit {
                recalibrator: Recalibrator::platt(LinearModel::from_params(k, k, run.params)?)?,
                budget: run.budget,
                schedule: run.schedule,
            })
        }
    }
}
