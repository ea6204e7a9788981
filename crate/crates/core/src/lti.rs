//! Continuous-time LTI models and their discretization.
//!
//! Dynamics and input matrices use a zero-order hold, the process noise
//! covariance comes from Van Loan's block matrix exponential, and the
//! measurement noise intensity is scaled by the sample interval.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, clamp_psd, expm, symmetrize};

/// Continuous-time model `ẋ = A x + G u + Γ v`, `z = H x + w`, where `v` and
/// `w` are white with intensities `V` and `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub dt: f64,
}

/// Discrete-time model `x_k = F x_{k-1} + B u_k + v_k`, `z_k = H x_k + w_k`
/// with `v_k ~ N(0, Q)` and `w_k ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub dt: f64,
}

impl ContinuousModel {
    pub fn new(
        a: DMatrix<f64>,
        g: DMatrix<f64>,
        gamma: DMatrix<f64>,
        h: DMatrix<f64>,
        v: DMatrix<f64>,
        w: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let model = Self {
            a,
            g,
            gamma,
            h,
            v,
            w,
            dt,
        };
        model.validate()?;
        Ok(model)
    }

    /// Double integrator on a 1D track with a measured position: the robot
    /// example used by the bundled scenarios.
    pub fn double_integrator(v: f64, w: f64, dt: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, v),
            DMatrix::from_element(1, 1, w),
            dt,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn meas_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(
                "dt",
                format!("must be positive and finite, got {}", self.dt),
            ));
        }
        let n = self.a.nrows();
        if n == 0 || !self.a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                n,
                self.a.ncols()
            )));
        }
        if self.g.nrows() != n {
            return Err(Error::Dimension(format!(
                "G must have {n} rows, got {}",
                self.g.nrows()
            )));
        }
        if self.gamma.nrows() != n {
            return Err(Error::Dimension(format!(
                "Gamma must have {n} rows, got {}",
                self.gamma.nrows()
            )));
        }
        let nw = self.gamma.ncols();
        if self.v.nrows() != nw || self.v.ncols() != nw {
            return Err(Error::Dimension(format!("V must be {nw}x{nw} to match Gamma")));
        }
        if self.h.ncols() != n || self.h.nrows() == 0 {
            return Err(Error::Dimension(format!("H must be p x {n} with p > 0")));
        }
        let p = self.h.nrows();
        if self.w.nrows() != p || self.w.ncols() != p {
            return Err(Error::Dimension(format!("W must be {p}x{p} to match H")));
        }
        for (name, m) in [("A", &self.a), ("G", &self.g), ("Gamma", &self.gamma), ("H", &self.h)] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(name, "entries must be finite"));
            }
        }
        clamp_psd(&self.v, "V")?;
        cholesky(&symmetrize(&self.w), "W")?;
        Ok(())
    }

    /// Full discretization: ZOH for `F`/`B`, Van Loan for `Q`, `W/dt` for `R`.
    pub fn discretize(&self) -> Result<DiscreteModel> {
        self.validate()?;
        let (f, b) = zoh_discretize(self)?;
        let q = van_loan_q(&self.a, &self.gamma, &self.v, self.dt)?;
        let r = discretize_r(&self.w, self.dt)?;
        Ok(DiscreteModel {
            f,
            b,
            h: self.h.clone(),
            q,
            r,
            dt: self.dt,
        })
    }
}

impl DiscreteModel {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn meas_dim(&self) -> usize {
        self.h.nrows()
    }
}

/// Zero-order-hold `F = e^{A dt}` and `B = ∫₀^dt e^{Aτ} dτ · G`, both read off
/// `exp([[A, G], [0, 0]] dt)`.
pub fn zoh_discretize(cm: &ContinuousModel) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = cm.a.nrows();
    let m = cm.g.ncols();
    if !cm.a.is_square() || cm.g.nrows() != n {
        return Err(Error::Dimension("A must be n x n and G n x m".into()));
    }
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&cm.a * cm.dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(&cm.g * cm.dt));
    let phi = expm(&aug)?;
    let f = phi.view((0, 0), (n, n)).into_owned();
    let b = phi.view((0, n), (n, m)).into_owned();
    Ok((f, b))
}

/// Discrete process noise covariance by Van Loan's method.
pub fn van_loan_q(a: &DMatrix<f64>, gamma: &DMatrix<f64>, v: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || gamma.nrows() != n || v.nrows() != gamma.ncols() || !v.is_square() {
        return Err(Error::Dimension(format!(
            "Van Loan needs A n x n, Gamma n x w, V w x w; got A {}x{}, Gamma {}x{}, V {}x{}",
            a.nrows(),
            a.ncols(),
            gamma.nrows(),
            gamma.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", format!("must be positive and finite, got {dt}")));
    }
    let v = clamp_psd(v, "V")?;
    let gvg = gamma * v * gamma.transpose();

    let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a * dt));
    m.view_mut((0, n), (n, n)).copy_from(&(gvg * dt));
    m.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * dt));
    let phi = expm(&m)?;
    let phi12 = phi.view((0, n), (n, n));
    let phi22 = phi.view((n, n), (n, n));
    let q = phi22.transpose() * phi12;
    clamp_psd(&q, "Q")
}

/// `R = W / dt`.
pub fn discretize_r(w: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", format!("must be positive and finite, got {dt}")));
    }
    if !w.is_square() {
        return Err(Error::Dimension("W must be square".into()));
    }
    let w = symmetrize(w);
    cholesky(&w, "W")?;
    Ok(w / dt)
}
