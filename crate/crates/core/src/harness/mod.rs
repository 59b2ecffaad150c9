//! Experiment orchestration.
//!
//! Each experiment trains a set of arms over several seeds, evaluates them
//! on held-out data and aggregates with the median across seeds. Seeds run in
//! parallel; all files are written afterwards from one thread.

mod config;
mod experiments;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accountant::{BudgetReport, PrivacyBudget};
use crate::calibration::{CalibrationReport, RecalKind, Recalibrator};
use crate::dpsgd::{Mode, TrainTrace};
use crate::error::{Error, Result};
use crate::models::LinearModel;

pub use config::{DataSource, ExperimentConfig, RecalSettings, TargetBudget};
pub use experiments::{
    run_clipping_ablation, run_epsilon_sweep, run_fig1, run_label_noise, run_noise_only_ablation, run_recalibration,
};

/// Confidence threshold for the "high confidence" mass reported per arm.
pub const HIGH_CONFIDENCE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Fig1,
    AblateClip,
    AblateNoise,
    SweepEps,
    Recalibrate,
    LabelNoise,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Fig1,
        ExperimentKind::AblateClip,
        ExperimentKind::AblateNoise,
        ExperimentKind::SweepEps,
        ExperimentKind::Recalibrate,
        ExperimentKind::LabelNoise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Fig1 => "fig1",
            ExperimentKind::AblateClip => "ablate-clip",
            ExperimentKind::AblateNoise => "ablate-noise",
            ExperimentKind::SweepEps => "sweep-eps",
            ExperimentKind::Recalibrate => "recalibrate",
            ExperimentKind::LabelNoise => "label-noise",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown experiment `{s}`")))
    }
}

/// Format of the summary file written next to the per-arm artifacts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(Error::invalid(format!("unknown output format `{other}`"))),
        }
    }
}

/// Result of one arm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: CalibrationReport,
    pub high_confidence_mass: f64,
    pub noise_multiplier: f64,
    /// One entry per private stage, in pipeline order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub budgets: Vec<BudgetReport>,
    /// Partition composition of `budgets`; absent for non-private arms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_budget: Option<PrivacyBudget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recalibrator: Option<Recalibrator>,
}

/// Medians across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub ece: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub high_confidence_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub mode: Mode,
    pub private: bool,
    pub clip_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<f64>,
    /// Highest achievable top-label posterior under the label corruption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bayes_ceiling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recalibration: Option<RecalKind>,
    pub per_seed: Vec<SeedResult>,
    pub median: ArmSummary,
}

impl ArmReport {
    pub fn seed(&self, seed: u64) -> Option<&SeedResult> {
        self.per_seed.iter().find(|r| r.seed == seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub seeds: Vec<u64>,
    pub bins: usize,
    pub arms: Vec<ArmReport>,
    /// Budget of the full private pipeline (recalibration experiment only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_budget: Option<PrivacyBudget>,
    /// Files written to the output directory, summary file included.
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,ece,accuracy,mean_confidence,high_confidence_mass,epsilon,delta\n");
        for arm in &self.arms {
            for r in &arm.per_seed {
                let (eps, delta) = r
                    .total_budget
                    .map(|b| (b.epsilon.to_string(), b.delta.to_string()))
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{eps},{delta}\n",
                    arm.name, r.seed, r.report.ece, r.report.accuracy, r.report.mean_confidence, r.high_confidence_mass
                ));
            }
            let m = &arm.median;
            out.push_str(&format!(
                "{},median,{},{},{},{},,\n",
                arm.name, m.ece, m.accuracy, m.mean_confidence, m.high_confidence_mass
            ));
        }
        out
    }
}

/// Everything an arm produced on one seed, before files are written.
#[derive(Debug, Clone)]
pub(crate) struct ArmSeedOutput {
    pub result: SeedResult,
    pub trace: Option<TrainTrace>,
    pub model: Option<LinearModel>,
}

/// Per-arm metadata that does not vary across seeds.
#[derive(Debug, Clone)]
pub(crate) struct ArmMeta {
    pub name: String,
    pub mode: Mode,
    pub clip_norm: f64,
    pub target_epsilon: Option<f64>,
    pub corruption: Option<f64>,
    pub bayes_ceiling: Option<f64>,
    pub recalibration: Option<RecalKind>,
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

fn summarize(results: &[SeedResult]) -> ArmSummary {
    let collect = |f: fn(&SeedResult) -> f64| median(&mut results.iter().map(f).collect::<Vec<_>>());
    ArmSummary {
        ece: collect(|r| r.report.ece),
        accuracy: collect(|r| r.report.accuracy),
        mean_confidence: collect(|r| r.report.mean_confidence),
        high_confidence_mass: collect(|r| r.high_confidence_mass),
    }
}

/// Output of a finished experiment: the report plus the per-arm, per-seed
/// payloads that become artifact files.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    outputs: Vec<(String, Vec<ArmSeedOutput>)>,
}

pub(crate) fn assemble(
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
    metas: Vec<ArmMeta>,
    per_seed: Vec<Vec<ArmSeedOutput>>,
    total_budget: Option<PrivacyBudget>,
) -> ExperimentRun {
    let mut arms = Vec::with_capacity(metas.len());
    let mut outputs = Vec::with_capacity(metas.len());
    for (i, meta) in metas.into_iter().enumerate() {
        let seed_outputs: Vec<ArmSeedOutput> = per_seed.iter().map(|s| s[i].clone()).collect();
        let results: Vec<SeedResult> = seed_outputs.iter().map(|o| o.result.clone()).collect();
        arms.push(ArmReport {
            median: summarize(&results),
            name: meta.name.clone(),
            mode: meta.mode,
            private: results.iter().all(|r| r.total_budget.is_some()),
            clip_norm: meta.clip_norm,
            target_epsilon: meta.target_epsilon,
            corruption: meta.corruption,
            bayes_ceiling: meta.bayes_ceiling,
            recalibration: meta.recalibration,
            per_seed: results,
        });
        outputs.push((meta.name, seed_outputs));
    }
    ExperimentRun {
        report: ExperimentReport {
            experiment: kind,
            seeds: cfg.seeds.clone(),
            bins: cfg.bins,
            arms,
            total_budget,
            artifacts: Vec::new(),
        },
        outputs,
    }
}

impl ExperimentRun {
    /// Writes every artifact into `dir` and returns the report with its
    /// artifact manifest filled in.
    pub fn write(mut self, dir: impl AsRef<Path>, format: OutputFormat) -> Result<ExperimentReport> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut artifacts = Vec::new();
        for (arm, seeds) in &self.outputs {
            for out in seeds {
                let stem = format!("{arm}.seed{}", out.result.seed);
                let bins = &out.result.report.bins;

                let name = format!("{stem}.reliability.csv");
                bins.write_reliability_csv(dir.join(&name))?;
                artifacts.push(name);

                let name = format!("{stem}.histogram.csv");
                bins.write_histogram_csv(dir.join(&name))?;
                artifacts.push(name);

                if let Some(trace) = &out.trace {
                    let name = format!("{stem}.trace.jsonl");
                    fs::write(dir.join(&name), trace.to_json_lines()?)?;
                    artifacts.push(name);
                }
                if let Some(model) = &out.model {
                    let name = format!("{stem}.model.json");
                    fs::write(dir.join(&name), model.to_json()?)?;
                    artifacts.push(name);
                }
                if let Some(recal) = &out.result.recalibrator {
                    let name = format!("{stem}.recalibrator.json");
                    fs::write(dir.join(&name), serde_json::to_string_pretty(recal)?)?;
                    artifacts.push(name);
                }
            }
        }

        let summary = match format {
            OutputFormat::Json => "report.json",
            OutputFormat::Csv => "summary.csv",
        };
        artifacts.push(summary.to_string());
        self.report.artifacts = artifacts;

        let body = match format {
            OutputFormat::Json => self.report.to_json()?,
            OutputFormat::Csv => self.report.to_csv(),
        };
        let mut f = fs::File::create(dir.join(summary))?;
        f.write_all(body.as_bytes())?;
        if format == OutputFormat::Json {
            f.write_all(b"\n")?;
        }
        Ok(self.report)
    }
}

/// Runs one experiment kind without writing anything.
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    match kind {
        ExperimentKind::Fig1 => run_fig1(cfg),
        ExperimentKind::AblateClip => run_clipping_ablation(cfg),
        ExperimentKind::AblateNoise => run_noise_only_ablation(cfg),
        ExperimentKind::SweepEps => run_epsilon_sweep(cfg),
        ExperimentKind::Recalibrate => run_recalibration(cfg),
        ExperimentKind::LabelNoise => run_label_noise(cfg),
    }
}

/// Runs an experiment and writes its artifacts to `cfg.output_dir`.
pub fn run_to_dir(kind: ExperimentKind, cfg: &ExperimentConfig, format: OutputFormat) -> Result<ExperimentReport> {
    run(kind, cfg)?.write(&cfg.output_dir, format)
}
