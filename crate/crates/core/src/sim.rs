//! Monte Carlo truth-model simulation.
//!
//! Every run owns an [`RngStream`] derived from `(master_seed, stream_id)`, so
//! a trajectory depends only on its stream and never on scheduling. Within a
//! run the draws happen in a fixed order: the initial state `x₀` first, then
//! for each step `k = 1..T` the process noise `v_k` followed by the
//! measurement noise `w_k`. Each Gaussian draw consumes exactly `n` standard
//! normals, even for a rank-deficient covariance.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::GaussianBelief;
use crate::linalg::psd_factor;
use crate::lti::DiscreteModel;

/// Identifies one reproducible random sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }

    /// ChaCha20 keyed by the master seed, positioned on its own stream; the
    /// generator is counter based so streams never overlap.
    pub fn generator(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Draws from `N(mean, cov)` for a fixed PSD covariance.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            factor: psd_factor(cov, "sampling covariance")?,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// Zero-mean draw `L ξ`.
    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * xi
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        mean + self.noise(rng)
    }
}

pub fn sample_gaussian<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    if cov.nrows() != mean.len() || !cov.is_square() {
        return Err(Error::Dimension(format!(
            "mean of length {} with {}x{} covariance",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    Ok(GaussianSampler::new(cov)?.sample(mean, rng))
}

/// Open-loop control `u_k = amplitude · cos(omega · k)` on every input channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlProfile {
    pub amplitude: f64,
    /// Radians per time step.
    pub omega: f64,
}

impl Default for ControlProfile {
    fn default() -> Self {
        Self {
            amplitude: 2.0,
            omega: 0.075,
        }
    }
}

impl ControlProfile {
    pub fn input(&self, k: usize, m: usize) -> DVector<f64> {
        DVector::from_element(m, self.amplitude * (self.omega * k as f64).cos())
    }
}

/// Control for the robot scenario at step `k`.
pub fn control_input(k: usize, m: usize, profile: &ControlProfile) -> DVector<f64> {
    profile.input(k, m)
}

/// Ground truth for steps `k = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// CSV with columns `k, x1..xn, z1..zp, u1..um`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (n, p, m) = match (self.states.first(), self.measurements.first(), self.controls.first()) {
            (Some(x), Some(z), Some(u)) => (x.len(), z.len(), u.len()),
            _ => (0, 0, 0),
        };
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=p).map(|i| format!("z{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![(k + 1).to_string()];
            row.extend(
                self.states[k]
                    .iter()
                    .chain(self.measurements[k].iter())
                    .chain(self.controls[k].iter())
                    .map(|v| crate::format_float(*v)),
            );
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Precomputed noise factors for repeatedly simulating one model.
#[derive(Debug, Clone)]
pub struct TruthSimulator {
    model: DiscreteModel,
    init_mean: DVector<f64>,
    init: GaussianSampler,
    process: GaussianSampler,
    meas: GaussianSampler,
    control: ControlProfile,
}

impl TruthSimulator {
    pub fn new(true_dm: &DiscreteModel, init: &GaussianBelief, control: ControlProfile) -> Result<Self> {
        if init.dim() != true_dm.state_dim() {
            return Err(Error::Dimension(format!(
                "initial belief has dimension {}, model has {}",
                init.dim(),
                true_dm.state_dim()
            )));
        }
        Ok(Self {
            model: true_dm.clone(),
            init_mean: init.mean.clone(),
            init: GaussianSampler::new(&init.cov)?,
            process: GaussianSampler::new(&true_dm.q)?,
            meas: GaussianSampler::new(&true_dm.r)?,
            control,
        })
    }

    pub fn run(&self, steps: usize, stream: RngStream) -> Result<Trajectory> {
        if steps == 0 {
            return Err(Error::invalid("T", "horizon must be at least one step"));
        }
        let dm = &self.model;
        let mut rng = stream.generator();
        let mut x = self.init.sample(&self.init_mean, &mut rng);
        let mut traj = Trajectory {
            states: Vec::with_capacity(steps),
            measurements: Vec::with_capacity(steps),
            controls: Vec::with_capacity(steps),
        };
        for k in 1..=steps {
            let u = self.control.input(k, dm.input_dim());
            let v = self.process.noise(&mut rng);
            x = &dm.f * &x + &dm.b * &u + v;
            let w = self.meas.noise(&mut rng);
            let z = &dm.h * &x + w;
            traj.states.push(x.clone());
            traj.measurements.push(z);
            traj.controls.push(u);
        }
        Ok(traj)
    }
}

pub fn simulate_truth(
    true_dm: &DiscreteModel,
    init: &GaussianBelief,
    steps: usize,
    control: &ControlProfile,
    stream: RngStream,
) -> Result<Trajectory> {
    TruthSimulator::new(true_dm, init, *control)?.run(steps, stream)
}
