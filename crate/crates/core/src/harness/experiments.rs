use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig};
use super::{assemble, ArmMeta, ArmSeedOutput, ExperimentKind, ExperimentRun, SeedResult, HIGH_CONFIDENCE};
use crate::accountant::{calibrate_noise, partition_compose, BudgetReport, PrivacyBudget};
use crate::calibration::{fit_recalibrator, predictions, RecalFit, RecalKind, RecalTraining, Recalibrator};
use crate::data::{self, corrupt_labels, load_features, random_split, Dataset};
use crate::dpsgd::{train, DpSgdConfig, Mode};
use crate::error::{Error, Result};
use crate::models::LinearModel;

enum Source {
    Synthetic {
        n: usize,
        n_test: usize,
    },
    Loaded {
        train: Dataset,
        test: Option<Dataset>,
        test_fraction: f64,
    },
}

impl Source {
    fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match &cfg.data {
            DataSource::Synthetic { n, n_test } => Source::Synthetic { n: *n, n_test: *n_test },
            DataSource::Features {
                train,
                test,
                test_fraction,
            } => Source::Loaded {
                train: load_features(train)?,
                test: test.as_ref().map(load_features).transpose()?,
                test_fraction: *test_fraction,
            },
        })
    }

    fn num_classes(&self) -> usize {
        match self {
            Source::Synthetic { .. } => 2,
            Source::Loaded { train, test, .. } => {
                train.num_classes().max(test.as_ref().map_or(0, Dataset::num_classes))
            }
        }
    }

    /// `(train, test)` for one seed.
    fn split(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let k = self.num_classes();
        let (train, test) = match self {
            Source::Synthetic { n, n_test } => (
                data::make_gaussian_mixture(*n, seed),
                data::make_gaussian_mixture_test(*n_test, seed),
            ),
            Source::Loaded {
                train,
                test: Some(test),
                ..
            } => (train.clone(), test.clone()),
            Source::Loaded {
                train,
                test: None,
                test_fraction,
            } => {
                let pair = random_split(train, *test_fraction, seed)?;
                (pair.train, pair.recal)
            }
        };
        Ok((with_classes(train, k)?, with_classes(test, k)?))
    }
}

fn with_classes(d: Dataset, k: usize) -> Result<Dataset> {
    if d.num_classes() == k {
        return Ok(d);
    }
    let dim = d.dim();
    Dataset::new(d.examples().to_vec(), k, dim)
}

/// Bayes ceiling on top-label confidence under uniform label corruption.
pub fn bayes_ceiling(p: f64, num_classes: usize) -> f64 {
    1.0 - p * (1.0 - 1.0 / num_classes as f64)
}

fn in_arm<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        arm @ Error::Arm { .. } => arm,
        other => Error::Arm {
            arm: name.to_string(),
            source: Box::new(other),
        },
    })
}

/// Optimiser settings of one arm on `n` training examples.
fn arm_config(
    cfg: &ExperimentConfig,
    mode: Mode,
    clip_norm: f64,
    target_epsilon: Option<f64>,
    seed: u64,
    n: usize,
) -> Result<DpSgdConfig> {
    let mut c = DpSgdConfig {
        mode,
        clip_norm,
        seed,
        delta: cfg.target.delta,
        ..cfg.train.clone()
    };
    c.noise_multiplier = if !mode.noises() {
        0.0
    } else if cfg.calibrate_noise {
        let schedule = c.schedule(n)?;
        let eps = target_epsilon.unwrap_or(cfg.target.epsilon);
        calibrate_noise(
            PrivacyBudget::new(eps, cfg.target.delta)?,
            schedule.q,
            schedule.total_steps,
        )?
    } else {
        cfg.train.noise_multiplier
    };
    Ok(c)
}

fn seed_result(
    seed: u64,
    model: &LinearModel,
    recal: Option<&Recalibrator>,
    test: &Dataset,
    bins: usize,
    noise_multiplier: f64,
    budgets: Vec<BudgetReport>,
) -> Result<SeedResult> {
    let preds = predictions(model, recal, test)?;
    let total_budget = budgets.iter().map(BudgetReport::budget).reduce(partition_compose);
    Ok(SeedResult {
        seed,
        report: preds.report(bins)?,
        high_confidence_mass: preds.mass_at_least(HIGH_CONFIDENCE),
        noise_multiplier,
        budgets,
        total_budget,
        recalibrator: recal.cloned(),
    })
}

/// An arm trained from scratch on the (possibly corrupted) training data.
#[derive(Debug, Clone)]
struct Plan {
    name: String,
    mode: Mode,
    clip_norm: f64,
    target_epsilon: Option<f64>,
    corruption: Option<f64>,
}

impl Plan {
    fn new(name: impl Into<String>, mode: Mode, clip_norm: f64) -> Self {
        Self {
            name: name.into(),
            mode,
            clip_norm,
            target_epsilon: None,
            corruption: None,
        }
    }

    fn meta(&self, num_classes: usize) -> ArmMeta {
        ArmMeta {
            name: self.name.clone(),
            mode: self.mode,
            clip_norm: self.clip_norm,
            target_epsilon: self.target_epsilon,
            corruption: self.corruption,
            bayes_ceiling: self.corruption.map(|p| bayes_ceiling(p, num_classes)),
            recalibration: None,
        }
    }

    fn run(&self, cfg: &ExperimentConfig, seed: u64, train_data: &Dataset, test: &Dataset) -> Result<ArmSeedOutput> {
        let corrupted;
        let data = match self.corruption {
            Some(p) => {
                corrupted = corrupt_labels(train_data, p, seed)?;
                &corrupted
            }
            None => train_data,
        };
        let c = arm_config(cfg, self.mode, self.clip_norm, self.target_epsilon, seed, data.len())?;
        let init = LinearModel::zeros(data.num_classes(), data.dim());
        let outcome = train(&init, data, &c, test)?;
        let budgets = outcome.budget.report().cloned().into_iter().collect();
        let result = seed_result(seed, &outcome.model, None, test, cfg.bins, c.noise_multiplier, budgets)?;
        Ok(ArmSeedOutput {
            result,
            trace: Some(outcome.trace),
            model: Some(outcome.model),
        })
    }
}

/// Runs `per_seed` for every configured seed in parallel and returns the
/// outputs in seed order. The first failing seed's error wins.
fn over_seeds(
    cfg: &ExperimentConfig,
    per_seed: impl Fn(u64) -> Result<Vec<ArmSeedOutput>> + Sync,
) -> Result<Vec<Vec<ArmSeedOutput>>> {
    let results: Vec<Result<Vec<ArmSeedOutput>>> = cfg.seeds.par_iter().map(|&s| per_seed(s)).collect();
    results.into_iter().collect()
}

fn run_plans(kind: ExperimentKind, cfg: &ExperimentConfig, plans: Vec<Plan>) -> Result<ExperimentRun> {
    let source = Source::prepare(cfg)?;
    let per_seed = over_seeds(cfg, |seed| {
        let (train_data, test) = source.split(seed)?;
        plans
            .iter()
            .map(|p| in_arm(&p.name, p.run(cfg, seed, &train_data, &test)))
            .collect()
    })?;
    let k = source.num_classes();
    let metas = plans.iter().map(|p| p.meta(k)).collect();
    Ok(assemble(kind, cfg, metas, per_seed, None))
}

/// Non-private SGD against DP-SGD on the same data.
pub fn run_fig1(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let c = cfg.train.clip_norm;
    let plans = vec![
        Plan::new("non_private", Mode::NonPrivate, c),
        Plan::new("dp", Mode::Dp, c),
    ];
    run_plans(ExperimentKind::Fig1, cfg, plans)
}

fn number_label(v: f64) -> String {
    format!("{v}")
}

/// DP-SGD at a fixed target epsilon for each configured clip norm.
pub fn run_clipping_ablation(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let plans = cfg
        .clip_norms
        .iter()
        .map(|&c| Plan::new(format!("dp_c{}", number_label(c)), Mode::Dp, c))
        .collect();
    run_plans(ExperimentKind::AblateClip, cfg, plans)
}

/// Separates clipping from noise: dp, clip-only, noise-only, non-private.
pub fn run_noise_only_ablation(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let c = cfg.train.clip_norm;
    let plans = vec![
        Plan::new("dp", Mode::Dp, c),
        Plan::new("clip_only", Mode::ClipOnly, c),
        Plan::new("noise_only", Mode::NoiseOnly, c),
        Plan::new("non_private", Mode::NonPrivate, c),
    ];
    run_plans(ExperimentKind::AblateNoise, cfg, plans)
}

/// One DP arm per target epsilon, plus the infinite-epsilon arm (which runs
/// the non-private path) and an explicit non-private reference.
pub fn run_epsilon_sweep(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let c = cfg.train.clip_norm;
    let mut plans: Vec<Plan> = Vec::new();
    for &eps in &cfg.epsilons {
        let plan = if eps.is_finite() {
            Plan {
                target_epsilon: Some(eps),
                ..Plan::new(format!("eps_{}", number_label(eps)), Mode::Dp, c)
            }
        } else {
            Plan::new("eps_inf", Mode::NonPrivate, c)
        };
        plans.push(plan);
    }
    if !plans.iter().any(|p| p.name == "eps_inf") {
        plans.push(Plan::new("eps_inf", Mode::NonPrivate, c));
    }
    plans.push(Plan::new("non_private", Mode::NonPrivate, c));
    run_plans(ExperimentKind::SweepEps, cfg, plans)
}

/// DP and non-private arms trained on labels corrupted with each configured
/// probability; test labels stay clean.
pub fn run_label_noise(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let c = cfg.train.clip_norm;
    let mut plans = Vec::new();
    for &p in &cfg.corruption {
        let label = number_label(p);
        for (prefix, mode) in [("dp", Mode::Dp), ("non_private", Mode::NonPrivate)] {
            plans.push(Plan {
                corruption: Some(p),
                ..Plan::new(format!("{prefix}_p{label}"), mode, c)
            });
        }
    }
    run_plans(ExperimentKind::LabelNoise, cfg, plans)
}

fn recal_config(cfg: &ExperimentConfig, mode: Mode, seed: u64, n: usize) -> Result<DpSgdConfig> {
    let r = &cfg.recal;
    let mut c = DpSgdConfig {
        clip_norm: r.clip_norm,
        noise_multiplier: 0.0,
        expected_batch: r.expected_batch,
        learning_rate: r.learning_rate,
        lr_decay: r.lr_decay,
        epochs: r.epochs,
        mode,
        seed,
        delta: cfg.target.delta,
    };
    if mode.noises() {
        c.noise_multiplier = if cfg.calibrate_noise {
            let schedule = c.schedule(n)?;
            calibrate_noise(
                PrivacyBudget::new(cfg.target.epsilon, cfg.target.delta)?,
                schedule.q,
                schedule.total_steps,
            )?
        } else {
            cfg.train.noise_multiplier
        };
    }
    Ok(c)
}

const RECAL_ARMS: [(&str, Option<RecalKind>, bool); 4] = [
    ("dp", None, true),
    ("dp_ts", Some(RecalKind::Temperature), true),
    ("dp_ps", Some(RecalKind::Platt), true),
    ("dp_np_ts", Some(RecalKind::Temperature), false),
];

/// Split, DP training on the train part, then private and non-private
/// recalibration on the held-out part.
pub fn run_recalibration(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let source = Source::prepare(cfg)?;
    let per_seed = over_seeds(cfg, |seed| {
        let (full, test) = source.split(seed)?;
        let split = random_split(&full, cfg.validation_ratio, seed)?;

        let c = in_arm(
            "dp",
            arm_config(cfg, Mode::Dp, cfg.train.clip_norm, None, seed, split.train.len()),
        )?;
        let init = LinearModel::zeros(full.num_classes(), full.dim());
        let outcome = in_arm("dp", train(&init, &split.train, &c, &test))?;
        let model = outcome.model;
        let train_budget: Vec<BudgetReport> = outcome.budget.report().cloned().into_iter().collect();

        let mut outputs = vec![ArmSeedOutput {
            result: in_arm(
                "dp",
                seed_result(
                    seed,
                    &model,
                    None,
                    &test,
                    cfg.bins,
                    c.noise_multiplier,
                    train_budget.clone(),
                ),
            )?,
            trace: Some(outcome.trace),
            model: Some(model.clone()),
        }];

        for (name, kind, private) in &RECAL_ARMS[1..] {
            let kind = kind.expect("recalibrated arm");
            let fitted = in_arm(name, fit_stage(cfg, &model, &split.recal, kind, *private, seed))?;
            let budgets = match (private, fitted.budget.report()) {
                (true, Some(r)) => train_budget.iter().cloned().chain([r.clone()]).collect(),
                _ => Vec::new(),
            };
            let result = in_arm(
                name,
                seed_result(
                    seed,
                    &model,
                    Some(&fitted.recalibrator),
                    &test,
                    cfg.bins,
                    c.noise_multiplier,
                    budgets,
                ),
            )?;
            outputs.push(ArmSeedOutput {
                result,
                trace: None,
                model: None,
            });
        }
        Ok(outputs)
    })?;

    let total_budget = per_seed.first().and_then(|s| s[1].result.total_budget);
    let metas = RECAL_ARMS
        .iter()
        .map(|(name, kind, _)| ArmMeta {
            name: name.to_string(),
            mode: Mode::Dp,
            clip_norm: cfg.train.clip_norm,
            target_epsilon: None,
            corruption: None,
            bayes_ceiling: None,
            recalibration: *kind,
        })
        .collect();
    Ok(assemble(
        ExperimentKind::Recalibrate,
        cfg,
        metas,
        per_seed,
        total_budget,
    ))
}

fn fit_stage(
    cfg: &ExperimentConfig,
    model: &LinearModel,
    recal: &Dataset,
    kind: RecalKind,
    private: bool,
    seed: u64,
) -> Result<RecalFit> {
    let mode = if private { Mode::Dp } else { Mode::NonPrivate };
    let c = recal_config(cfg, mode, seed, recal.len())?;
    let logits = model.logits_batch(recal)?;
    let labels: Vec<usize> = recal.labels().collect();
    fit_recalibrator(kind, &logits, &labels, &RecalTraining::Private(c))
}
