//! Kalman filter noise auto-tuning by Bayesian optimization.
//!
//! A design point `q` (process-noise intensities and/or measurement-noise
//! variances) is scored by running the filter it defines against Monte Carlo
//! truth simulations and measuring how far the averaged NEES or NIS sits from
//! its χ² expectation. A Gaussian-process surrogate of that noisy cost,
//! searched with Expected Improvement maximized by DIRECT, picks the next
//! point to try.
//!
//! Module map:
//!
//! - [`lti`] continuous models, ZOH and Van Loan discretization
//! - [`kalman`] predict/update
//! - [`sim`] seeded truth-model simulation
//! - [`consistency`] NEES/NIS, χ² bounds, `J_NEES`/`J_NIS`
//! - [`gp`] Matérn-3/2 surrogate and hyperparameter learning
//! - [`acquisition`] Expected Improvement and DIRECT
//! - [`tuner`] the optimization loop
//! - [`scenario`] config files, bundled scenarios and output artifacts

pub mod acquisition;
pub mod consistency;
pub mod error;
pub mod gp;
pub mod kalman;
pub mod linalg;
pub mod lti;
pub mod scenario;
pub mod sim;
pub mod tuner;

pub use error::{Error, Result};

/// Locale-independent float formatting for CSV output: 17 significant digits
/// in scientific notation, so values round-trip exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}
