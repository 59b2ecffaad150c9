//! Softmax-linear classifiers.
//!
//! Binary logistic regression is the `K = 2` case. Parameters are flattened
//! row-major over the weight matrix followed by the bias, and every gradient
//! in the crate uses that layout.

use serde::{Deserialize, Serialize};

use crate::calibration::{log_sum_exp, softmax};
use crate::data::{Dataset, Example};
use crate::dpsgd::Objective;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct LinearModel {
    num_classes: usize,
    dim: usize,
    params: Vec<f64>,
}

/// On-disk model layout.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    #[serde(rename = "K")]
    num_classes: usize,
    #[serde(rename = "d")]
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl TryFrom<Checkpoint> for LinearModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        LinearModel::from_parts(c.num_classes, c.dim, c.weights, c.bias)
    }
}

impl From<LinearModel> for Checkpoint {
    fn from(m: LinearModel) -> Self {
        Checkpoint {
            num_classes: m.num_classes,
            dim: m.dim,
            weights: m.weights().to_vec(),
            bias: m.bias().to_vec(),
        }
    }
}

impl LinearModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            params: vec![0.0; num_classes * (dim + 1)],
        }
    }

    /// The `K x K` identity map with zero bias.
    pub fn identity(num_classes: usize) -> Self {
        let mut m = Self::zeros(num_classes, num_classes);
        for k in 0..num_classes {
            m.params[k * num_classes + k] = 1.0;
        }
        m
    }

    pub fn from_parts(num_classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != num_classes * dim {
            return Err(Error::DimensionMismatch {
                expected: num_classes * dim,
                actual: weights.len(),
            });
        }
        if bias.len() != num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_classes,
                actual: bias.len(),
            });
        }
        let mut params = weights;
        params.extend(bias);
        Self::from_params(num_classes, dim, params)
    }

    /// Builds a model from a flattened parameter vector (weights, then bias).
    pub fn from_params(num_classes: usize, dim: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != num_classes * (dim + 1) {
            return Err(Error::DimensionMismatch {
                expected: num_classes * (dim + 1),
                actual: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Self {
            num_classes,
            dim,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.num_classes * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.num_classes * self.dim..]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// `W x + bias`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(linear_logits(self.num_classes, self.dim, &self.params, x))
    }

    /// Argmax class and its softmax probability. Ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, f64)> {
        let z = self.logits(x)?;
        Ok(top_label(&softmax(&z)))
    }

    /// Logits for every example of `data`.
    pub fn logits_batch(&self, data: &Dataset) -> Result<LogitsBatch> {
        let rows = data
            .examples()
            .iter()
            .map(|ex| self.logits(&ex.features))
            .collect::<Result<Vec<_>>>()?;
        LogitsBatch::new(rows, self.num_classes)
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        self.check_dim(&ex.features)?;
        if ex.label >= self.num_classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                ex.label, self.num_classes
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over `batch` and one flattened gradient per
    /// example. Each gradient is that of the example's own loss.
    pub fn loss_and_per_example_grads(&self, batch: &[Example]) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for ex in batch {
            self.check_example(ex)?;
            let mut g = vec![0.0; self.num_params()];
            total += linear_loss_grad(
                self.num_classes,
                self.dim,
                &self.params,
                &ex.features,
                ex.label,
                Some(&mut g),
            );
            grads.push(g);
        }
        Ok((total / batch.len() as f64, grads))
    }

    /// Mean cross-entropy over a dataset.
    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for ex in data.examples() {
            self.check_example(ex)?;
            total += linear_loss_grad(self.num_classes, self.dim, &self.params, &ex.features, ex.label, None);
        }
        Ok(total / data.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Unnormalised class scores, one row of length `K` per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsBatch {
    rows: Vec<Vec<f64>>,
    num_classes: usize,
}

impl LogitsBatch {
    pub fn new(rows: Vec<Vec<f64>>, num_classes: usize) -> Result<Self> {
        for row in &rows {
            if row.len() != num_classes {
                return Err(Error::DimensionMismatch {
                    expected: num_classes,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("logits must be finite"));
            }
        }
        Ok(Self { rows, num_classes })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub(crate) fn linear_logits(k: usize, d: usize, params: &[f64], x: &[f64]) -> Vec<f64> {
    let (w, b) = params.split_at(k * d);
    (0..k)
        .map(|c| w[c * d..(c + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b[c])
        .collect()
}

/// Cross-entropy of one example under the softmax-linear model `params`.
/// When `grad` is given the per-example gradient is written into it.
pub(crate) fn linear_loss_grad(
    k: usize,
    d: usize,
    params: &[f64],
    x: &[f64],
    label: usize,
    grad: Option<&mut [f64]>,
) -> f64 {
    let z = linear_logits(k, d, params, x);
    let lse = log_sum_exp(&z);
    if let Some(grad) = grad {
        let (gw, gb) = grad.split_at_mut(k * d);
        for (c, zc) in z.iter().enumerate() {
            let r = (zc - lse).exp() - if c == label { 1.0 } else { 0.0 };
            gb[c] = r;
            for (g, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                *g = r * xi;
            }
        }
    }
    lse - z[label]
}

/// Training objective of a softmax-linear model over fixed inputs.
pub(crate) struct LinearObjective<'a> {
    pub num_classes: usize,
    pub dim: usize,
    pub inputs: Vec<&'a [f64]>,
    pub labels: Vec<usize>,
}

impl<'a> LinearObjective<'a> {
    pub fn for_dataset(data: &'a Dataset) -> Self {
        Self {
            num_classes: data.num_classes(),
            dim: data.dim(),
            inputs: data.examples().iter().map(|e| e.features.as_slice()).collect(),
            labels: data.labels().collect(),
        }
    }
}

impl Objective for LinearObjective<'_> {
    fn num_examples(&self) -> usize {
        self.inputs.len()
    }

    fn num_params(&self) -> usize {
        self.num_classes * (self.dim + 1)
    }

    fn loss_grad(&self, params: &[f64], index: usize, grad: &mut [f64]) -> f64 {
        linear_loss_grad(
            self.num_classes,
            self.dim,
            params,
            self.inputs[index],
            self.labels[index],
            Some(grad),
        )
    }
}

/// Index and value of the largest probability, lowest index on ties.
pub fn top_label(probs: &[f64]) -> (usize, f64) {
    probs.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, p)| if p > best.1 { (i, p) } else { best },
    )
}
