//! Python bindings. Configs and reports cross the boundary as plain dicts.

use dpcal::accountant::{self, MechanismSpec, PrivacyBudget};
use dpcal::calibration::{self, RecalKind, RecalTraining, Recalibrator as CoreRecal};
use dpcal::data::{self, Example};
use dpcal::dpsgd::{self, DpSgdConfig};
use dpcal::harness::{self, ExperimentConfig, ExperimentKind, OutputFormat};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: dpcal::Error) -> PyErr {
    match e {
        dpcal::Error::Io(io) => PyIOError::new_err(io.to_string()),
        dpcal::Error::TrainingFailure { .. } | dpcal::Error::Arm { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let py_text = match obj {
        Some(o) if !o.is_none() => o.py().import("json")?.call_method1("dumps", (o,))?,
        _ => return serde_json::from_str("{}").map_err(|e| PyValueError::new_err(e.to_string())),
    };
    let text: String = py_text.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Labelled feature vectors.
#[pyclass(name = "Dataset", module = "dpcal", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, num_classes=None))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: Option<usize>) -> PyResult<Self> {
        if features.len() != labels.len() {
            return Err(PyValueError::new_err("features and labels differ in length"));
        }
        let dim = features.first().map_or(0, Vec::len);
        let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
        let examples = features
            .into_iter()
            .zip(labels)
            .map(|(x, y)| Example::new(x, y))
            .collect();
        data::Dataset::new(examples, k, dim)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.examples().iter().map(|e| e.features.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_features(path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dim={}, num_classes={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.num_classes()
        )
    }
}

/// Multinomial logistic regression.
#[pyclass(name = "LinearModel", module = "dpcal", skip_from_py_object)]
#[derive(Clone)]
struct PyLinearModel {
    inner: dpcal::LinearModel,
}

#[pymethods]
impl PyLinearModel {
    #[new]
    fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            inner: dpcal::LinearModel::zeros(num_classes, dim),
        }
    }

    #[staticmethod]
    fn from_parts(num_classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> PyResult<Self> {
        dpcal::LinearModel::from_parts(num_classes, dim, weights, bias)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        dpcal::LinearModel::from_json(text)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.inner.bias().to_vec()
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.logits(&x).map_err(err)
    }

    /// `(label, confidence)`.
    fn predict(&self, x: Vec<f64>) -> PyResult<(usize, f64)> {
        self.inner.predict(&x).map_err(err)
    }

    fn mean_loss(&self, data: PyRef<'_, PyDataset>) -> PyResult<f64> {
        self.inner.mean_loss(&data.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "LinearModel(num_classes={}, dim={})",
            self.inner.num_classes(),
            self.inner.dim()
        )
    }
}

/// Fitted temperature or Platt map.
#[pyclass(name = "Recalibrator", module = "dpcal", skip_from_py_object)]
#[derive(Clone)]
struct PyRecalibrator {
    inner: CoreRecal,
}

#[pymethods]
impl PyRecalibrator {
    #[staticmethod]
    fn temperature(t: f64) -> PyResult<Self> {
        CoreRecal::temperature(t).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind() {
            RecalKind::Temperature => "temperature",
            RecalKind::Platt => "platt",
        }
    }

    /// The temperature, or None for a Platt map.
    #[getter]
    fn value(&self) -> Option<f64> {
        match &self.inner {
            CoreRecal::Temperature { temperature } => Some(*temperature),
            CoreRecal::Platt { .. } => None,
        }
    }

    fn apply(&self, logits: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.apply(&logits).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(|inner| Self { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        match &self.inner {
            CoreRecal::Temperature { temperature } => format!("Recalibrator(temperature={temperature})"),
            CoreRecal::Platt { map } => format!("Recalibrator(platt, num_classes={})", map.num_classes()),
        }
    }
}

#[pyfunction]
fn make_gaussian_mixture(n: usize, seed: u64) -> PyDataset {
    PyDataset {
        inner: data::make_gaussian_mixture(n, seed),
    }
}

#[pyfunction]
fn load_features(path: &str) -> PyResult<PyDataset> {
    data::load_features(path).map(|inner| PyDataset { inner }).map_err(err)
}

/// `(train, recal)` with `round(alpha * n)` examples held out.
#[pyfunction]
fn random_split(dataset: PyRef<'_, PyDataset>, alpha: f64, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
    let pair = data::random_split(&dataset.inner, alpha, seed).map_err(err)?;
    Ok((PyDataset { inner: pair.train }, PyDataset { inner: pair.recal }))
}

#[pyfunction]
fn corrupt_labels(dataset: PyRef<'_, PyDataset>, p: f64, seed: u64) -> PyResult<PyDataset> {
    data::corrupt_labels(&dataset.inner, p, seed)
        .map(|inner| PyDataset { inner })
        .map_err(err)
}

#[pyfunction]
fn clip_per_example(grad: Vec<f64>, clip_norm: f64) -> Vec<f64> {
    dpsgd::clip_per_example(&grad, clip_norm)
}

/// Trains from `init` (zeros when omitted). `config` is a dict of DP-SGD
/// settings; missing keys take their defaults. Returns
/// `(model, trace, budget)`.
#[pyfunction]
#[pyo3(signature = (data, config=None, eval_data=None, init=None))]
fn train<'py>(
    py: Python<'py>,
    data: PyRef<'_, PyDataset>,
    config: Option<&Bound<'py, PyAny>>,
    eval_data: Option<PyRef<'_, PyDataset>>,
    init: Option<PyRef<'_, PyLinearModel>>,
) -> PyResult<(PyLinearModel, Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let cfg: DpSgdConfig = from_py(config)?;
    let init = match init {
        Some(m) => m.inner.clone(),
        None => dpcal::LinearModel::zeros(data.inner.num_classes(), data.inner.dim()),
    };
    let eval = eval_data.map(|d| d.inner.clone()).unwrap_or_else(|| data.inner.clone());
    let train_data = data.inner.clone();
    let outcome = py
        .detach(|| dpsgd::train(&init, &train_data, &cfg, &eval))
        .map_err(err)?;
    Ok((
        PyLinearModel { inner: outcome.model },
        to_py(py, &outcome.trace.records)?,
        to_py(py, &outcome.budget)?,
    ))
}

/// Calibration report dict for `model` (optionally recalibrated) on `data`.
#[pyfunction]
#[pyo3(signature = (model, data, recalibrator=None, bins=calibration::DEFAULT_BINS))]
fn evaluate<'py>(
    py: Python<'py>,
    model: PyRef<'_, PyLinearModel>,
    data: PyRef<'_, PyDataset>,
    recalibrator: Option<PyRef<'_, PyRecalibrator>>,
    bins: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let report =
        calibration::evaluate(&model.inner, recalibrator.as_ref().map(|r| &r.inner), &data.inner, bins).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (confidences, correct, bins=calibration::DEFAULT_BINS))]
fn ece(confidences: Vec<f64>, correct: Vec<bool>, bins: usize) -> PyResult<f64> {
    calibration::ece(&confidences, &correct, bins).map_err(err)
}

/// Fits a `"temperature"` or `"platt"` recalibrator on `model`'s logits over
/// `data`. With `config` (a DP-SGD dict) the fit is private; otherwise plain
/// full-batch gradient descent. Returns `(recalibrator, budget)`.
#[pyfunction]
#[pyo3(signature = (kind, model, data, config=None))]
fn fit_recalibrator<'py>(
    py: Python<'py>,
    kind: &str,
    model: PyRef<'_, PyLinearModel>,
    data: PyRef<'_, PyDataset>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<(PyRecalibrator, Bound<'py, PyAny>)> {
    let kind = match kind {
        "temperature" => RecalKind::Temperature,
        "platt" => RecalKind::Platt,
        other => return Err(PyValueError::new_err(format!("unknown recalibrator `{other}`"))),
    };
    let training = match config {
        Some(c) if !c.is_none() => RecalTraining::Private(from_py(Some(c))?),
        _ => RecalTraining::non_private(),
    };
    let logits = model.inner.logits_batch(&data.inner).map_err(err)?;
    let labels: Vec<usize> = data.inner.labels().collect();
    let fit = py
        .detach(|| calibration::fit_recalibrator(kind, &logits, &labels, &training))
        .map_err(err)?;
    Ok((
        PyRecalibrator {
            inner: fit.recalibrator,
        },
        to_py(py, &fit.budget)?,
    ))
}

/// `(epsilon, delta)` spent by `steps` subsampled Gaussian steps.
#[pyfunction]
#[pyo3(signature = (q, sigma, steps, delta=accountant::DEFAULT_DELTA))]
fn epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> PyResult<(f64, f64)> {
    let b = MechanismSpec { q, sigma, steps }.budget(delta).map_err(err)?;
    Ok((b.epsilon, b.delta))
}

#[pyfunction]
#[pyo3(signature = (target_epsilon, q, steps, delta=accountant::DEFAULT_DELTA))]
fn calibrate_noise(target_epsilon: f64, q: f64, steps: u64, delta: f64) -> PyResult<f64> {
    let target = PrivacyBudget::new(target_epsilon, delta).map_err(err)?;
    accountant::calibrate_noise(target, q, steps).map_err(err)
}

/// Budget of mechanisms run on disjoint partitions of the data.
#[pyfunction]
fn partition_compose(a: (f64, f64), b: (f64, f64)) -> PyResult<(f64, f64)> {
    let a = PrivacyBudget::new(a.0, a.1).map_err(err)?;
    let b = PrivacyBudget::new(b.0, b.1).map_err(err)?;
    let c = accountant::partition_compose(a, b);
    Ok((c.epsilon, c.delta))
}

/// Runs an experiment (e.g. `"fig1"`) and returns its report dict. With
/// `out`, artifacts are written there as well.
#[pyfunction]
#[pyo3(signature = (kind, config=None, out=None, format="json"))]
fn run_experiment<'py>(
    py: Python<'py>,
    kind: &str,
    config: Option<&Bound<'py, PyAny>>,
    out: Option<&str>,
    format: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: ExperimentKind = kind.parse().map_err(err)?;
    let format: OutputFormat = format.parse().map_err(err)?;
    let mut cfg: ExperimentConfig = from_py(config)?;
    cfg.validate().map_err(err)?;
    if let Some(dir) = out {
        cfg.output_dir = dir.into();
    }
    let report = py
        .detach(|| {
            let run = harness::run(kind, &cfg)?;
            match out {
                Some(_) => run.write(&cfg.output_dir, format),
                None => Ok(run.report),
            }
        })
        .map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
#[pyo3(name = "dpcal")]
fn dpcal_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyLinearModel>()?;
    m.add_class::<PyRecalibrator>()?;
    m.add_function(wrap_pyfunction!(make_gaussian_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(random_split, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt_labels, m)?)?;
    m.add_function(wrap_pyfunction!(clip_per_example, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(fit_recalibrator, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_noise, m)?)?;
    m.add_function(wrap_pyfunction!(partition_compose, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
