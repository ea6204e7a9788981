//! Linear Kalman filter predict/update.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, symmetrize};
use crate::lti::DiscreteModel;

/// Gaussian state estimate `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() != mean.len() {
            return Err(Error::Dimension(format!(
                "belief mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("belief"));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub belief: GaussianBelief,
    /// `z − H x̂` (measured minus predicted).
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
}

pub fn predict(prior: &GaussianBelief, dm: &DiscreteModel, u: &DVector<f64>) -> Result<GaussianBelief> {
    let n = dm.state_dim();
    if prior.dim() != n {
        return Err(Error::Dimension(format!(
            "belief has dimension {}, model has {n}",
            prior.dim()
        )));
    }
    if u.len() != dm.input_dim() {
        return Err(Error::Dimension(format!(
            "control has length {}, model expects {}",
            u.len(),
            dm.input_dim()
        )));
    }
    let mean = &dm.f * &prior.mean + &dm.b * u;
    let cov = symmetrize(&(&dm.f * &prior.cov * dm.f.transpose() + &dm.q));
    Ok(GaussianBelief { mean, cov })
}

pub fn update(pred: &GaussianBelief, dm: &DiscreteModel, z: &DVector<f64>) -> Result<UpdateResult> {
    let n = dm.state_dim();
    if pred.dim() != n {
        return Err(Error::Dimension(format!(
            "belief has dimension {}, model has {n}",
            pred.dim()
        )));
    }
    if z.len() != dm.meas_dim() {
        return Err(Error::Dimension(format!(
            "measurement has length {}, model expects {}",
            z.len(),
            dm.meas_dim()
        )));
    }
    let h = &dm.h;
    let p = &pred.cov;
    let s = symmetrize(&(h * p * h.transpose() + &dm.r));
    let chol = cholesky(&s, "innovation covariance")?;

    // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ since S and P are symmetric.
    let ph_t = p * h.transpose();
    let gain = chol.solve(&ph_t.transpose()).transpose();

    let innovation = z - h * &pred.mean;
    let mean = &pred.mean + &gain * &innovation;
    let cov = symmetrize(&(p - &gain * &s * gain.transpose()));
    Ok(UpdateResult {
        belief: GaussianBelief { mean, cov },
        innovation,
        innovation_cov: s,
    })
}
