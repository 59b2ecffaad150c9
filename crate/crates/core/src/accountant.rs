//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP is computed at a grid of orders, composed additively over
//! steps and converted to an `(epsilon, delta)` guarantee by minimising over
//! the grid. [`calibrate_noise`] inverts that map by bisection on the noise
//! multiplier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RDP order grid.
pub const DEFAULT_ORDERS: [f64; 16] = [
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0,
];

pub const DEFAULT_DELTA: f64 = 1e-5;

/// Noise-multiplier search bracket used by [`calibrate_noise`].
pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 100.0;
const BISECTION_WIDTH: f64 = 1e-4;

/// An `(epsilon, delta)` differential-privacy guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }
}

/// RDP guarantee `epsilon(alpha)` at a list of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if orders.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: orders.len(),
                actual: values.len(),
            });
        }
        check_orders(&orders)?;
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("RDP values must be finite and non-negative"));
        }
        Ok(Self { orders, values })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// One Poisson-subsampled Gaussian mechanism repeated `steps` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

impl MechanismSpec {
    /// Spent `(epsilon, delta)` over the default order grid.
    pub fn budget(&self, delta: f64) -> Result<PrivacyBudget> {
        let per_step = rdp_subsampled_gaussian(self.q, self.sigma, &DEFAULT_ORDERS)?;
        rdp_to_dp(&compose_steps(&per_step, self.steps), delta)
    }

    pub fn report(&self, delta: f64) -> Result<BudgetReport> {
        let spent = self.budget(delta)?;
        Ok(BudgetReport {
            epsilon: spent.epsilon,
            delta: spent.delta,
            sigma: self.sigma,
            q: self.q,
            steps: self.steps,
            orders_used: DEFAULT_ORDERS.to_vec(),
        })
    }
}

/// Serialized form of a spent budget together with the mechanism behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    pub orders_used: Vec<f64>,
}

impl BudgetReport {
    pub fn budget(&self) -> PrivacyBudget {
        PrivacyBudget {
            epsilon: self.epsilon,
            delta: self.delta,
        }
    }
}

/// Privacy outcome of a training run. Runs without both clipping and noise
/// have unbounded sensitivity or no randomisation and carry no guarantee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SpentBudget {
    Private(BudgetReport),
    NotPrivate,
}

impl SpentBudget {
    pub fn report(&self) -> Option<&BudgetReport> {
        match self {
            SpentBudget::Private(r) => Some(r),
            SpentBudget::NotPrivate => None,
        }
    }

    pub fn is_private(&self) -> bool {
        matches!(self, SpentBudget::Private(_))
    }
}

fn check_orders(orders: &[f64]) -> Result<()> {
    if let Some(a) = orders.iter().find(|a| !(**a > 1.0 && a.is_finite())) {
        return Err(Error::invalid(format!("RDP order must be > 1, got {a}")));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("RDP orders must be strictly increasing"));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// `log A_alpha` for integer `alpha`, where `A_alpha` is the binomial
/// expansion of the Rényi moment of the subsampled Gaussian mixture.
fn log_moment_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let a = alpha as f64;
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        if k > 0 {
            log_binom += (a - kf + 1.0).ln() - kf.ln();
        }
        let term = log_binom + kf * log_q + (a - kf) * log_1mq + (kf * kf - kf) / two_var;
        acc = log_add(acc, term);
    }
    acc
}

fn rdp_single(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    // RDP is non-decreasing in the order, so the next integer order bounds
    // fractional ones from above.
    let int_alpha = alpha.ceil() as u64;
    let value = log_moment_integer(q, sigma, int_alpha) / (int_alpha as f64 - 1.0);
    value.max(0.0)
}

/// Per-step RDP of the Poisson-subsampled Gaussian mechanism with sampling
/// rate `q` and noise multiplier `sigma`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, orders: &[f64]) -> Result<RdpCurve> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise multiplier must be > 0, got {sigma}")));
    }
    check_orders(orders)?;
    let values = orders.iter().map(|&a| rdp_single(q, sigma, a)).collect();
    Ok(RdpCurve {
        orders: orders.to_vec(),
        values,
    })
}

/// RDP composes additively: `steps` repetitions scale every value.
pub fn compose_steps(curve: &RdpCurve, steps: u64) -> RdpCurve {
    RdpCurve {
        orders: curve.orders.clone(),
        values: curve.values.iter().map(|v| v * steps as f64).collect(),
    }
}

/// `epsilon = min_alpha [ rdp(alpha) + log(1/delta) / (alpha - 1) ]`.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<PrivacyBudget> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let log_inv_delta = -delta.ln();
    let epsilon = curve
        .orders
        .iter()
        .zip(&curve.values)
        .map(|(a, v)| v + log_inv_delta / (a - 1.0))
        .fold(f64::INFINITY, f64::min);
    Ok(PrivacyBudget { epsilon, delta })
}

/// Smallest noise multiplier (to bisection precision) whose accounted
/// epsilon after `steps` steps at sampling rate `q` does not exceed
/// `target.epsilon`.
pub fn calibrate_noise(target: PrivacyBudget, q: f64, steps: u64) -> Result<f64> {
    if !(target.epsilon > 0.0) {
        return Err(Error::invalid("target epsilon must be > 0"));
    }
    if !(target.delta > 0.0 && target.delta < 1.0) {
        return Err(Error::invalid("target delta must lie in (0, 1)"));
    }
    if steps == 0 {
        return Err(Error::invalid("calibration needs at least one step"));
    }
    let eps_at = |sigma: f64| -> Result<f64> { Ok(MechanismSpec { q, sigma, steps }.budget(target.delta)?.epsilon) };

    if eps_at(SIGMA_MAX)? > target.epsilon {
        return Err(Error::CalibrationFailure {
            target_epsilon: target.epsilon,
            sigma_min: SIGMA_MIN,
            sigma_max: SIGMA_MAX,
        });
    }
    if eps_at(SIGMA_MIN)? <= target.epsilon {
        return Ok(SIGMA_MIN);
    }

    // invariant: eps(lo) > target >= eps(hi)
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    let floor = target.epsilon * (1.0 - 1e-4);
    for _ in 0..200 {
        if hi - lo <= BISECTION_WIDTH && eps_at(hi)? >= floor {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? > target.epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Combined guarantee of two mechanisms run on disjoint partitions of the
/// data: the elementwise maximum of the two budgets.
pub fn partition_compose(a: PrivacyBudget, b: PrivacyBudget) -> PrivacyBudget {
    PrivacyBudget {
        epsilon: a.epsilon.max(b.epsilon),
        delta: a.delta.max(b.delta),
    }
}
