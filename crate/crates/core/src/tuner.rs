//! The Bayesian-optimization tuning loop.
//!
//! Seed the surrogate with a Latin-hypercube design, then repeatedly refit
//! it, maximize Expected Improvement with DIRECT, evaluate the consistency
//! cost at the chosen point and append the result. The incumbent is the best
//! evaluation seen so far.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{direct_optimize, expected_improvement, DirectOptions, SearchBox};
use crate::consistency::{monte_carlo, ConsistencyRecord, COST_CAP};
use crate::error::{Error, Result};
use crate::gp::{learn_hyperparams_with_offset, Hyperparams, SurrogateModel};
use crate::kalman::GaussianBelief;
use crate::lti::{van_loan_q, ContinuousModel, DiscreteModel};
use crate::sim::{ControlProfile, RngStream, TruthSimulator};

/// Stream id reserved for the seed design, outside the range used by
/// Monte Carlo runs.
pub const SEED_DESIGN_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Diagonal entry of the continuous process noise intensity `V`.
    ProcessNoiseIntensity,
    /// Diagonal entry of the discrete measurement noise covariance `R`.
    MeasurementNoiseVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignParam {
    pub name: String,
    pub role: ParamRole,
    /// Diagonal index within `V` or `R`.
    #[serde(default)]
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Nees,
    Nis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub parameters: Vec<DesignParam>,
    #[serde(default = "default_cost")]
    pub cost: CostKind,
}

fn default_cost() -> CostKind {
    CostKind::Nees
}

impl DesignSpec {
    pub fn dim(&self) -> usize {
        self.parameters.len()
    }

    pub fn search_box(&self) -> Result<SearchBox> {
        SearchBox::new(
            self.parameters.iter().map(|p| p.lower).collect(),
            self.parameters.iter().map(|p| p.upper).collect(),
        )
    }

    pub fn validate(&self, truth: &ContinuousModel) -> Result<()> {
        let d = self.dim();
        if !(1..=8).contains(&d) {
            return Err(Error::invalid(
                "design.parameters",
                format!("need between 1 and 8 parameters, got {d}"),
            ));
        }
        for p in &self.parameters {
            if !(p.lower.is_finite() && p.upper.is_finite() && p.lower < p.upper) {
                return Err(Error::invalid(
                    "design.parameters",
                    format!("`{}` needs finite bounds with lower < upper", p.name),
                ));
            }
            if p.lower < 0.0 {
                return Err(Error::invalid(
                    "design.parameters",
                    format!("`{}` is a noise level and cannot go below zero", p.name),
                ));
            }
            let limit = match p.role {
                ParamRole::ProcessNoiseIntensity => truth.v.nrows(),
                ParamRole::MeasurementNoiseVariance => truth.w.nrows(),
            };
            if p.index >= limit {
                return Err(Error::Dimension(format!(
                    "`{}` targets diagonal entry {} but the matrix is {limit}x{limit}",
                    p.name, p.index
                )));
            }
        }
        for (i, a) in self.parameters.iter().enumerate() {
            if self.parameters[..i]
                .iter()
                .any(|b| b.role == a.role && b.index == a.index)
            {
                return Err(Error::invalid(
                    "design.parameters",
                    format!("`{}` duplicates another parameter", a.name),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    /// Monte Carlo runs per cost evaluation.
    pub n_runs: usize,
    /// Time steps per run.
    pub horizon: usize,
    /// Seed design size; `None` picks 5 for one parameter, 5·d otherwise.
    pub n_seed: Option<usize>,
    pub max_iterations: usize,
    /// Type-I error rate for the reported χ² bounds.
    pub alpha: f64,
    pub master_seed: u64,
    /// DIRECT evaluations per acquisition maximization.
    pub acquisition_budget: usize,
    /// Stop once the incumbent improved by less than `stall_tolerance` over
    /// this many iterations; 0 disables the check.
    pub stall_window: usize,
    pub stall_tolerance: f64,
    /// Fresh truth trajectories for every evaluation; `false` reuses the same
    /// streams everywhere (common random numbers).
    pub fresh_trajectories: bool,
    /// Use the mean of the observed costs as the GP prior mean instead of 0.
    pub center_targets: bool,
    /// Lattice points per dimension in the surrogate grid export.
    pub grid_points: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            n_runs: 10,
            horizon: 200,
            n_seed: None,
            max_iterations: 35,
            alpha: 0.05,
            master_seed: 1,
            acquisition_budget: 400,
            stall_window: 15,
            stall_tolerance: 1e-4,
            fresh_trajectories: true,
            center_targets: false,
            grid_points: 101,
        }
    }
}

impl TunerConfig {
    pub fn seed_count(&self, dim: usize) -> usize {
        self.n_seed.unwrap_or(if dim == 1 { 5 } else { 5 * dim })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::invalid("tuner.n_runs", "need at least one Monte Carlo run"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("tuner.horizon", "need at least one time step"));
        }
        if self.seed_count(dim) < 2 {
            return Err(Error::invalid("tuner.n_seed", "need at least two seed points"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("tuner.alpha", "must lie in (0, 1)"));
        }
        if self.acquisition_budget == 0 {
            return Err(Error::invalid("tuner.acquisition_budget", "must be positive"));
        }
        if self.grid_points < 2 {
            return Err(Error::invalid(
                "tuner.grid_points",
                "need at least two points per dimension",
            ));
        }
        if self.stall_tolerance.is_nan() || self.stall_tolerance < 0.0 {
            return Err(Error::invalid("tuner.stall_tolerance", "must be non-negative"));
        }
        Ok(())
    }

    /// Hyperparameters are relearned every iteration early on, then every
    /// fifth iteration.
    pub fn refit_due(&self, iteration: usize) -> bool {
        iteration <= 10 || iteration.is_multiple_of(5)
    }
}

/// The true system plus the filter's initial condition and control input.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub truth: ContinuousModel,
    pub init: GaussianBelief,
    pub control: ControlProfile,
    true_discrete: DiscreteModel,
}

impl Scenario {
    pub fn new(truth: ContinuousModel, init: GaussianBelief, control: ControlProfile) -> Result<Self> {
        let true_discrete = truth.discretize()?;
        if init.dim() != truth.state_dim() {
            return Err(Error::Dimension(format!(
                "initial state has dimension {}, model has {}",
                init.dim(),
                truth.state_dim()
            )));
        }
        crate::linalg::clamp_psd(&init.cov, "P0")?;
        Ok(Self {
            truth,
            init,
            control,
            true_discrete,
        })
    }

    /// The 1D robot: double integrator, `dt = 0.1`, `V = 1`, `W = 0.1`
    /// (so `R = 1`), `x₀ ~ N(0, I)`, `u_k = 2 cos(0.075 k)`.
    pub fn robot() -> Self {
        let truth = ContinuousModel::double_integrator(1.0, 0.1, 0.1).expect("valid robot model");
        let init = GaussianBelief::new(nalgebra::DVector::zeros(2), DMatrix::identity(2, 2)).expect("valid belief");
        Self::new(truth, init, ControlProfile::default()).expect("valid robot scenario")
    }

    pub fn true_discrete(&self) -> &DiscreteModel {
        &self.true_discrete
    }

    /// True value of each design parameter.
    pub fn truth_point(&self, spec: &DesignSpec) -> Vec<f64> {
        spec.parameters
            .iter()
            .map(|p| match p.role {
                ParamRole::ProcessNoiseIntensity => self.truth.v[(p.index, p.index)],
                ParamRole::MeasurementNoiseVariance => self.true_discrete.r[(p.index, p.index)],
            })
            .collect()
    }

    /// Filter model for design point `q`: true dynamics, `Q` from Van Loan on
    /// the candidate `V`, `R` with the candidate variances.
    pub fn filter_model(&self, q: &[f64], spec: &DesignSpec) -> Result<DiscreteModel> {
        if q.len() != spec.dim() {
            return Err(Error::Dimension(format!(
                "design point has {} entries, spec has {}",
                q.len(),
                spec.dim()
            )));
        }
        let mut v = self.truth.v.clone();
        let mut r = self.true_discrete.r.clone();
        let mut touched_v = false;
        for (p, &val) in spec.parameters.iter().zip(q) {
            match p.role {
                ParamRole::ProcessNoiseIntensity => {
                    v[(p.index, p.index)] = val;
                    touched_v = true;
                }
                ParamRole::MeasurementNoiseVariance => r[(p.index, p.index)] = val,
            }
        }
        let mut dm = self.true_discrete.clone();
        if touched_v {
            dm.q = van_loan_q(&self.truth.a, &self.truth.gamma, &v, self.truth.dt)?;
        }
        dm.r = r;
        Ok(dm)
    }

    fn streams(&self, config: &TunerConfig, eval_index: u64) -> Vec<RngStream> {
        let n = config.n_runs as u64;
        let base = if config.fresh_trajectories { eval_index * n } else { 0 };
        (0..n).map(|i| RngStream::new(config.master_seed, base + i)).collect()
    }

    /// Full consistency record for design point `q` under evaluation
    /// `eval_index`'s random streams.
    pub fn consistency(
        &self,
        q: &[f64],
        spec: &DesignSpec,
        config: &TunerConfig,
        eval_index: u64,
    ) -> Result<ConsistencyRecord> {
        let filter = self.filter_model(q, spec)?;
        let truth = TruthSimulator::new(&self.true_discrete, &self.init, self.control)?;
        monte_carlo(
            &truth,
            &filter,
            &self.init,
            config.horizon,
            &self.streams(config, eval_index),
            config.alpha,
        )
    }
}

/// `J_NEES` or `J_NIS` at design point `q`. Filter failures (for example a
/// singular innovation covariance) score [`COST_CAP`].
pub fn evaluate_cost(q: &[f64], spec: &DesignSpec, config: &TunerConfig, scenario: &Scenario, eval_index: u64) -> f64 {
    match scenario.consistency(q, spec, config, eval_index) {
        Ok(rec) => match spec.cost {
            CostKind::Nees => rec.j_nees,
            CostKind::Nis => rec.j_nis,
        },
        Err(_) => COST_CAP,
    }
}

/// Latin-hypercube design: each dimension is cut into `n` equal strata, every
/// stratum holds exactly one point, and strata are paired across dimensions
/// by independent random permutations.
pub fn seed_design(bounds: &SearchBox, n: usize, stream: RngStream) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::invalid("n_seed", "need at least two seed points"));
    }
    let mut rng = stream.generator();
    let d = bounds.dim();
    let mut unit = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (row, s) in unit.iter_mut().zip(strata) {
            let offset: f64 = rng.random();
            row[j] = (s as f64 + offset) / n as f64;
        }
    }
    Ok(unit.iter().map(|u| bounds.from_unit(u)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// 0 for seed points, then the GPBO iteration that proposed the point.
    pub iteration: usize,
    /// Selects the Monte Carlo streams used.
    pub eval_index: u64,
    pub q: Vec<f64>,
    pub cost: f64,
    /// Best cost so far, including this evaluation.
    pub incumbent_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct TuningSession {
    pub spec: DesignSpec,
    pub config: TunerConfig,
    pub history: Vec<Evaluation>,
    pub hyper: Hyperparams,
    /// Surrogate fitted to the whole history.
    pub surrogate: SurrogateModel,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

impl TuningSession {
    pub fn bounds(&self) -> SearchBox {
        self.spec.search_box().expect("validated at session start")
    }

    /// Best evaluation in the history (first one on ties).
    pub fn incumbent(&self) -> &Evaluation {
        let mut best = &self.history[0];
        for e in &self.history {
            if e.cost < best.cost {
                best = e;
            }
        }
        best
    }

    /// Surrogate mean and standard deviation at a point in design units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let (mu, var) = self.surrogate.predict(&self.bounds().to_unit(q));
        (mu, var.sqrt())
    }

    /// Minimum of the surrogate mean found by DIRECT, in design units.
    pub fn surrogate_minimum(&self, budget: usize) -> Result<(Vec<f64>, f64)> {
        let unit = SearchBox::unit(self.spec.dim());
        let res = direct_optimize(
            |u| self.surrogate.predict(u).0,
            &unit,
            DirectOptions::with_budget(budget),
        )?;
        Ok((self.bounds().from_unit(&res.x), res.value))
    }

    /// CSV with columns `iteration, q1..qd, cost, incumbent_cost`.
    pub fn write_history_csv<W: Write>(&self, mut out: W) -> Result<()> {
        use crate::format_float as ff;
        let d = self.spec.dim();
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=d).map(|i| format!("q{i}")));
        header.push("cost".into());
        header.push("incumbent_cost".into());
        writeln!(out, "{}", header.join(","))?;
        for e in &self.history {
            let mut row = vec![e.iteration.to_string()];
            row.extend(e.q.iter().map(|v| ff(*v)));
            row.push(ff(e.cost));
            row.push(ff(e.incumbent_cost));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Lattice of surrogate predictions, columns `q1..qd, mu, sigma`. Each
    /// dimension gets `points` samples, reduced in high dimension to keep the
    /// grid under about 10⁵ rows.
    pub fn write_surrogate_grid_csv<W: Write>(&self, points: usize, mut out: W) -> Result<()> {
        use crate::format_float as ff;
        let d = self.spec.dim();
        let per_dim = points.min((1e5f64.powf(1.0 / d as f64)).floor() as usize).max(2);
        let mut header: Vec<String> = (1..=d).map(|i| format!("q{i}")).collect();
        header.push("mu".into());
        header.push("sigma".into());
        writeln!(out, "{}", header.join(","))?;
        let total = per_dim.pow(d as u32);
        let bounds = self.bounds();
        let mut unit = vec![0.0; d];
        for flat in 0..total {
            let mut rest = flat;
            // First coordinate varies slowest.
            for j in (0..d).rev() {
                unit[j] = (rest % per_dim) as f64 / (per_dim - 1) as f64;
                rest /= per_dim;
            }
            let (mu, var) = self.surrogate.predict(&unit);
            let q = bounds.from_unit(&unit);
            let mut row: Vec<String> = q.iter().map(|v| ff(*v)).collect();
            row.push(ff(mu));
            row.push(ff(var.sqrt()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn fit_surrogate(
    unit: &[Vec<f64>],
    y: &[f64],
    hyper: Hyperparams,
    offset: f64,
) -> Result<(SurrogateModel, Hyperparams)> {
    let mut hyper = hyper;
    // Raising the noise floor always restores conditioning eventually.
    for _ in 0..12 {
        match SurrogateModel::fit_with_offset(unit, y, hyper, offset) {
            Ok(m) => return Ok((m, hyper)),
            Err(Error::IllConditioned { .. }) | Err(Error::InvalidArgument { .. }) => {
                hyper.sigma_n2 = (hyper.sigma_n2 * 10.0).max(1e-8 * hyper.sigma0);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::IllConditioned { jitter: hyper.sigma_n2 })
}

/// Resumable Bayesian-optimization loop with Expected Improvement. Every
/// evaluation gets its own consecutive `eval_index`, seeds first.
#[derive(Debug, Clone)]
pub struct Tuner {
    spec: DesignSpec,
    config: TunerConfig,
    scenario: Scenario,
    bounds: SearchBox,
    history: Vec<Evaluation>,
    hyper: Hyperparams,
    iterations: usize,
    stop_reason: Option<StopReason>,
}

impl Tuner {
    /// Validates the inputs and evaluates the seed design.
    pub fn new(spec: &DesignSpec, config: &TunerConfig, scenario: &Scenario) -> Result<Self> {
        spec.validate(&scenario.truth)?;
        config.validate(spec.dim())?;
        let bounds = spec.search_box()?;
        let n_seed = config.seed_count(spec.dim());
        let seeds = seed_design(&bounds, n_seed, RngStream::new(config.master_seed, SEED_DESIGN_STREAM))?;
        let mut tuner = Self {
            spec: spec.clone(),
            config: config.clone(),
            scenario: scenario.clone(),
            bounds,
            history: Vec::with_capacity(n_seed + config.max_iterations),
            hyper: Hyperparams::default(),
            iterations: 0,
            stop_reason: (config.max_iterations == 0).then_some(StopReason::MaxIterations),
        };
        for q in seeds {
            tuner.record(0, q);
        }
        Ok(tuner)
    }

    fn record(&mut self, iteration: usize, q: Vec<f64>) {
        let eval_index = self.history.len() as u64;
        let cost = evaluate_cost(&q, &self.spec, &self.config, &self.scenario, eval_index);
        let best = self.history.last().map_or(cost, |e| e.incumbent_cost.min(cost));
        self.history.push(Evaluation {
            iteration,
            eval_index,
            q,
            cost,
            incumbent_cost: best,
        });
    }

    fn training_data(&self) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
        let unit: Vec<Vec<f64>> = self.history.iter().map(|e| self.bounds.to_unit(&e.q)).collect();
        let y: Vec<f64> = self.history.iter().map(|e| e.cost).collect();
        let offset = if self.config.center_targets {
            y.iter().sum::<f64>() / y.len() as f64
        } else {
            0.0
        };
        (unit, y, offset)
    }

    pub fn history(&self) -> &[Evaluation] {
        &self.history
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn hyper(&self) -> Hyperparams {
        self.hyper
    }

    pub fn bounds(&self) -> &SearchBox {
        &self.bounds
    }

    /// `Some` once the loop has terminated.
    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop_reason
    }

    /// Surrogate fitted to the current history with the current
    /// hyperparameters (no relearning).
    pub fn surrogate(&self) -> Result<SurrogateModel> {
        let (unit, y, offset) = self.training_data();
        Ok(fit_surrogate(&unit, &y, self.hyper, offset)?.0)
    }

    /// Runs one iteration: relearn hyperparameters if due, fit, maximize EI,
    /// evaluate. Returns the new evaluation, or `None` if already finished.
    pub fn step(&mut self) -> Result<Option<&Evaluation>> {
        if self.stop_reason.is_some() {
            return Ok(None);
        }
        let it = self.iterations + 1;
        let (unit, y, offset) = self.training_data();
        if self.config.refit_due(it) {
            self.hyper = learn_hyperparams_with_offset(&unit, &y, self.hyper, offset).unwrap_or(self.hyper);
        }
        let (model, used) = fit_surrogate(&unit, &y, self.hyper, offset)?;
        self.hyper = used;
        let f_best = self.history.last().map_or(f64::INFINITY, |e| e.incumbent_cost);
        let acq = direct_optimize(
            |u| -expected_improvement(u, &model, f_best),
            &SearchBox::unit(self.spec.dim()),
            DirectOptions::with_budget(self.config.acquisition_budget),
        )?;
        let q = self.bounds.from_unit(&acq.x);
        self.record(it, q);
        self.iterations = it;

        let window = self.config.stall_window;
        if window > 0 && it >= window {
            let now = self.history[self.history.len() - 1].incumbent_cost;
            let then = self.history[self.history.len() - 1 - window].incumbent_cost;
            if then - now < self.config.stall_tolerance {
                self.stop_reason = Some(StopReason::Stalled);
            }
        }
        if self.stop_reason.is_none() && it >= self.config.max_iterations {
            self.stop_reason = Some(StopReason::MaxIterations);
        }
        Ok(self.history.last())
    }

    /// Steps to termination and fits the final surrogate.
    pub fn finish(mut self) -> Result<TuningSession> {
        while self.step()?.is_some() {}
        let surrogate = self.surrogate()?;
        Ok(TuningSession {
            hyper: *surrogate.hyper(),
            spec: self.spec,
            config: self.config,
            history: self.history,
            surrogate,
            iterations: self.iterations,
            stop_reason: self.stop_reason.unwrap_or(StopReason::MaxIterations),
        })
    }
}

/// Runs [`Tuner`] to completion.
pub fn run_gpbo(spec: &DesignSpec, config: &TunerConfig, scenario: &Scenario) -> Result<TuningSession> {
    Tuner::new(spec, config, scenario)?.finish()
}
