use dpcal::calibration::{
    evaluate, fit_recalibrator, reliability_bins, softmax, RecalKind, RecalTraining, Recalibrator,
};
use dpcal::data::make_gaussian_mixture;
use dpcal::dpsgd::{train, DpSgdConfig, Mode};
use dpcal::models::LogitsBatch;
use dpcal::{Dataset, Example, LinearModel};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Logits with labels drawn from their own softmax, so `T = 1` is optimal.
fn calibrated_logits(n: usize, k: usize, scale: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
        let y = WeightedIndex::new(softmax(&z)).unwrap().sample(&mut rng);
        rows.push(z.iter().map(|v| v * scale).collect());
        labels.push(y);
    }
    (rows, labels)
}

fn fitted_temperature(scale: f64, training: &RecalTraining) -> f64 {
    let (rows, labels) = calibrated_logits(5000, 3, scale, 21);
    let batch = LogitsBatch::new(rows, 3).unwrap();
    match fit_recalibrator(RecalKind::Temperature, &batch, &labels, training)
        .unwrap()
        .recalibrator
    {
        Recalibrator::Temperature { temperature } => temperature,
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn calibrated_logits_keep_unit_temperature() {
    let t = fitted_temperature(1.0, &RecalTraining::non_private());
    assert!((0.9..=1.1).contains(&t), "T = {t}");
}

#[test]
fn doubled_logits_recover_temperature_two() {
    let t = fitted_temperature(2.0, &RecalTraining::non_private());
    assert!((t - 2.0).abs() <= 0.2, "T = {t}");
}

#[test]
fn degenerate_private_fit_matches_non_private() {
    let (rows, labels) = calibrated_logits(500, 3, 2.0, 5);
    let batch = LogitsBatch::new(rows, 3).unwrap();
    for kind in [RecalKind::Temperature, RecalKind::Platt] {
        let plain = fit_recalibrator(kind, &batch, &labels, &RecalTraining::non_private()).unwrap();
        let private_cfg = DpSgdConfig {
            noise_multiplier: 0.0,
            clip_norm: 1e6,
            learning_rate: 1.0,
            ..RecalTraining::private_defaults(batch.len(), 0.0, 9)
        };
        let private = fit_recalibrator(kind, &batch, &labels, &RecalTraining::Private(private_cfg)).unwrap();
        let (a, b) = match (&plain.recalibrator, &private.recalibrator) {
            (Recalibrator::Temperature { temperature: a }, Recalibrator::Temperature { temperature: b }) => {
                (vec![*a], vec![*b])
            }
            (Recalibrator::Platt { map: a }, Recalibrator::Platt { map: b }) => {
                (a.params().to_vec(), b.params().to_vec())
            }
            _ => unreachable!(),
        };
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()), "{kind:?}: {x} vs {y}");
        }
        assert!(!plain.budget.is_private());
    }
}

fn trained_model() -> (LinearModel, Dataset) {
    let data = make_gaussian_mixture(2000, 3);
    let cfg = DpSgdConfig {
        expected_batch: 500,
        epochs: 5,
        ..DpSgdConfig::default()
    };
    let model = train(&LinearModel::zeros(2, 2), &data, &cfg, &data).unwrap().model;
    (model, make_gaussian_mixture(1000, 4))
}

#[test]
fn temperature_never_changes_accuracy() {
    let (model, test) = trained_model();
    let base = evaluate(&model, None, &test, 15).unwrap();
    for t in [0.01, 0.3, 1.0, 2.5, 1000.0] {
        let r = Recalibrator::temperature(t).unwrap();
        assert_eq!(evaluate(&model, Some(&r), &test, 15).unwrap().accuracy, base.accuracy);
    }
}

#[test]
fn identity_platt_changes_nothing() {
    let (model, test) = trained_model();
    let base = evaluate(&model, None, &test, 15).unwrap();
    let identity = Recalibrator::platt(LinearModel::identity(2)).unwrap();
    assert_eq!(evaluate(&model, Some(&identity), &test, 15).unwrap(), base);
}

#[test]
fn certain_classifier_has_ece_one_minus_accuracy() {
    // Huge logit gap: every prediction is class 0 at confidence 1.0.
    let model = LinearModel::from_parts(2, 1, vec![0.0, 0.0], vec![1000.0, 0.0]).unwrap();
    let examples = (0..40)
        .map(|i| Example::new(vec![i as f64], usize::from(i % 4 == 0)))
        .collect();
    let data = Dataset::new(examples, 2, 1).unwrap();
    let r = evaluate(&model, None, &data, 15).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.mean_confidence, 1.0);
    assert!((r.ece - 0.25).abs() < 1e-15);
}

#[test]
fn report_ece_recomputes_from_bins() {
    let (model, test) = trained_model();
    let r = evaluate(&model, None, &test, 15).unwrap();
    let n = test.len() as f64;
    let recomputed: f64 = r
        .bins
        .bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.acc - b.conf).abs())
        .sum();
    assert_eq!(r.ece, recomputed);
    assert_eq!(r.bins.total(), test.len());
}

#[test]
fn reliability_bins_agree_with_ece() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let n = rng.random_range(1..500);
        let conf: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let bins = reliability_bins(&conf, &correct, 15).unwrap();
        assert_eq!(bins.ece(), dpcal::calibration::ece(&conf, &correct, 15).unwrap());
        assert_eq!(bins.total(), n);
        for b in bins.bins.iter().filter(|b| b.count > 0) {
            assert!(b.conf >= b.lo && b.conf <= b.hi);
            assert!((0.0..=1.0).contains(&b.acc));
        }
    }
}

#[test]
fn non_private_mode_yields_no_budget() {
    let (rows, labels) = calibrated_logits(200, 2, 1.0, 2);
    let batch = LogitsBatch::new(rows, 2).unwrap();
    let cfg = DpSgdConfig {
        mode: Mode::NonPrivate,
        ..RecalTraining::private_defaults(200, 1.0, 0)
    };
    let fit = fit_recalibrator(RecalKind::Temperature, &batch, &labels, &RecalTraining::Private(cfg)).unwrap();
    assert!(!fit.budget.is_private());
}
