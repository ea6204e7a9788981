//! Gaussian-process surrogate with a Matérn-3/2 kernel and zero prior mean.
//!
//! Inputs live on the unit cube; the tuner normalizes design points before
//! handing them over so that one shared length-scale is meaningful.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::acquisition::{direct_optimize, DirectOptions, SearchBox};
use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const BASE_JITTER: f64 = 1e-10;
const JITTER_ESCALATION: f64 = 100.0;
const DUPLICATE_RADIUS: f64 = 1e-12;

/// Natural-log bounds searched when learning hyperparameters.
pub const LOG_SIGMA0_BOUNDS: (f64, f64) = (-6.0, 6.0);
pub const LOG_ELL_BOUNDS: (f64, f64) = (-4.0, 2.0);
pub const LOG_NOISE_BOUNDS: (f64, f64) = (-10.0, 2.0);
pub const LEARN_BUDGET: usize = 200;

/// Kernel amplitude (a variance, in cost² units), length-scale, and
/// observation noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sigma0: f64,
    pub ell: f64,
    pub sigma_n2: f64,
}

impl Hyperparams {
    pub fn new(sigma0: f64, ell: f64, sigma_n2: f64) -> Result<Self> {
        let h = Self { sigma0, ell, sigma_n2 };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::invalid(
                "sigma0",
                format!("must be positive, got {}", self.sigma0),
            ));
        }
        if !(self.ell > 0.0 && self.ell.is_finite()) {
            return Err(Error::invalid("ell", format!("must be positive, got {}", self.ell)));
        }
        if !(self.sigma_n2 >= 0.0 && self.sigma_n2.is_finite()) {
            return Err(Error::invalid(
                "sigma_n2",
                format!("must be non-negative, got {}", self.sigma_n2),
            ));
        }
        Ok(())
    }

    fn from_log(p: &[f64]) -> Self {
        Self {
            sigma0: p[0].exp(),
            ell: p[1].exp(),
            sigma_n2: p[2].exp(),
        }
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            ell: 0.2,
            sigma_n2: 1e-2,
        }
    }
}

/// Matérn-3/2: `σ₀ (1 + √3 r/ℓ) exp(−√3 r/ℓ)` with `r = ‖q1 − q2‖₂`.
pub fn kernel(q1: &[f64], q2: &[f64], hyper: &Hyperparams) -> f64 {
    let r = q1.iter().zip(q2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    matern32(r, hyper)
}

fn matern32(r: f64, hyper: &Hyperparams) -> f64 {
    let s = SQRT3 * r / hyper.ell;
    hyper.sigma0 * (1.0 + s) * (-s).exp()
}

pub fn gram(inputs: &[Vec<f64>], hyper: &Hyperparams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.sigma0;
        for j in 0..i {
            let v = kernel(&inputs[i], &inputs[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Fitted GP: cached Cholesky factor of `K + σ_n² I` and the solve of the
/// (offset-shifted) targets.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    hyper: Hyperparams,
    /// Constant prior mean; zero unless the targets were centered.
    offset: f64,
    /// Diagonal jitter actually added on top of `σ_n²`.
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn check_inputs(inputs: &[Vec<f64>], targets: &[f64], hyper: &Hyperparams) -> Result<usize> {
    hyper.validate()?;
    if inputs.is_empty() {
        return Err(Error::invalid("inputs", "need at least one training point"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let d = inputs[0].len();
    if d == 0 {
        return Err(Error::Dimension("inputs must have at least one coordinate".into()));
    }
    for q in inputs {
        if q.len() != d {
            return Err(Error::Dimension(format!(
                "input of dimension {} among dimension {d}",
                q.len()
            )));
        }
        if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("inputs", "coordinates must lie in the unit cube"));
        }
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("targets"));
    }
    if hyper.sigma_n2 == 0.0 {
        for i in 0..inputs.len() {
            for j in 0..i {
                let dist = inputs[i]
                    .iter()
                    .zip(&inputs[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist < DUPLICATE_RADIUS {
                    return Err(Error::invalid(
                        "inputs",
                        format!("points {j} and {i} coincide and sigma_n2 = 0; the Gram matrix is singular"),
                    ));
                }
            }
        }
    }
    Ok(d)
}

/// Factors `K + (σ_n² + jitter) I`, escalating the jitter once.
fn factor(inputs: &[Vec<f64>], hyper: &Hyperparams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let k = gram(inputs, hyper);
    let mut jitter = BASE_JITTER * hyper.sigma0;
    for attempt in 0..2 {
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += hyper.sigma_n2 + jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, jitter));
        }
        if attempt == 0 {
            jitter *= JITTER_ESCALATION;
        }
    }
    Err(Error::IllConditioned { jitter })
}

impl SurrogateModel {
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], hyper: Hyperparams) -> Result<Self> {
        Self::fit_with_offset(inputs, targets, hyper, 0.0)
    }

    /// Fits against `targets − offset`; predictions add the offset back.
    pub fn fit_with_offset(inputs: &[Vec<f64>], targets: &[f64], hyper: Hyperparams, offset: f64) -> Result<Self> {
        check_inputs(inputs, targets, &hyper)?;
        let (chol, jitter) = factor(inputs, &hyper)?;
        let shifted = DVector::from_iterator(targets.len(), targets.iter().map(|t| t - offset));
        let alpha = chol.solve(&shifted);
        Ok(Self {
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            hyper,
            offset,
            jitter,
            chol,
            alpha,
        })
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn cross(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|x| kernel(x, q, &self.hyper)))
    }

    /// Posterior mean and variance (variance clamped at zero) at `q`.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let ks = self.cross(q);
        let mu = ks.dot(&self.alpha) + self.offset;
        let mut v = ks;
        // Only the lower triangle is read, so the unzeroed upper part is harmless.
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let var = (self.hyper.sigma0 - v.norm_squared()).max(0.0);
        (mu, var)
    }

    /// Negative log marginal likelihood of the shifted targets.
    pub fn nlml(&self) -> f64 {
        let n = self.targets.len() as f64;
        let shifted = DVector::from_iterator(self.targets.len(), self.targets.iter().map(|t| t - self.offset));
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        0.5 * shifted.dot(&self.alpha) + 0.5 * log_det + 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

pub fn negative_log_marginal_likelihood(inputs: &[Vec<f64>], targets: &[f64], hyper: &Hyperparams) -> Result<f64> {
    Ok(SurrogateModel::fit(inputs, targets, *hyper)?.nlml())
}

fn nlml_with_offset(inputs: &[Vec<f64>], targets: &[f64], hyper: &Hyperparams, offset: f64) -> Option<f64> {
    SurrogateModel::fit_with_offset(inputs, targets, *hyper, offset)
        .ok()
        .map(|m| m.nlml())
        .filter(|v| v.is_finite())
}

/// Maximum-likelihood hyperparameters: DIRECT over the log box, then keep
/// whichever of the optimum and `current` has lower NLML.
pub fn learn_hyperparams(inputs: &[Vec<f64>], targets: &[f64], current: Hyperparams) -> Result<Hyperparams> {
    learn_hyperparams_with_offset(inputs, targets, current, 0.0)
}

pub fn learn_hyperparams_with_offset(
    inputs: &[Vec<f64>],
    targets: &[f64],
    current: Hyperparams,
    offset: f64,
) -> Result<Hyperparams> {
    if inputs.len() < 2 {
        return Err(Error::invalid(
            "inputs",
            "learning hyperparameters needs at least two points",
        ));
    }
    // Surface shape errors now; factorization failures are handled below.
    check_inputs(
        inputs,
        targets,
        &Hyperparams {
            sigma_n2: 1.0,
            ..current
        },
    )?;
    let bounds = SearchBox::new(
        vec![LOG_SIGMA0_BOUNDS.0, LOG_ELL_BOUNDS.0, LOG_NOISE_BOUNDS.0],
        vec![LOG_SIGMA0_BOUNDS.1, LOG_ELL_BOUNDS.1, LOG_NOISE_BOUNDS.1],
    )?;
    let found = direct_optimize(
        |p| nlml_with_offset(inputs, targets, &Hyperparams::from_log(p), offset).unwrap_or(f64::INFINITY),
        &bounds,
        DirectOptions::with_budget(LEARN_BUDGET),
    )?;
    let candidate = Hyperparams::from_log(&found.x);
    let cand_nlml = nlml_with_offset(inputs, targets, &candidate, offset);
    let curr_nlml = nlml_with_offset(inputs, targets, &current, offset);
    Ok(match (cand_nlml, curr_nlml) {
        (Some(c), Some(k)) if c < k => candidate,
        (Some(_), None) => candidate,
        _ => current,
    })
}
