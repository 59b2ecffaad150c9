//! Differentially private training and calibration for linear classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] holds datasets, synthetic generators, splitting and label corruption.
//! * [`models`] is the softmax-linear classifier with exact per-example gradients.
//! * [`accountant`] implements Rényi-DP accounting for the Poisson-subsampled
//!   Gaussian mechanism and noise calibration.
//! * [`dpsgd`] is the DP-SGD engine with its ablation modes.
//! * [`calibration`] measures ECE / reliability and fits (private) recalibrators.
//! * [`harness`] wires everything into reproducible experiments.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod calibration;
pub mod data;
pub mod dpsgd;
pub mod error;
pub mod harness;
pub mod models;
mod rng;

pub use accountant::{MechanismSpec, PrivacyBudget, RdpCurve, SpentBudget};
pub use calibration::{BinStats, CalibrationReport, Recalibrator};
pub use data::{Dataset, Example, SplitPair};
pub use dpsgd::{DpSgdConfig, Mode, TrainTrace};
pub use error::{Error, Result};
pub use models::LinearModel;
