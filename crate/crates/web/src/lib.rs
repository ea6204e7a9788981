//! WebAssembly bindings for the browser demo: the 1D-robot cost landscape,
//! a NEES/NIS trace with χ² bounds, and a step-by-step tuning session.
//!
//! Inputs are clamped to sane ranges instead of raising errors, so every
//! exported call succeeds.

use kftune::consistency::ConsistencyRecord;
use kftune::scenario::ScenarioConfig;
use kftune::tuner::{evaluate_cost, CostKind, DesignSpec, Scenario, Tuner, TunerConfig};
use wasm_bindgen::prelude::*;

/// Upper end of the demo's V axis; the lower end is 0.
pub const V_MAX: f64 = 10.0;

fn case1(seed: u32, n_runs: usize, nis: bool) -> (DesignSpec, TunerConfig, Scenario) {
    let c = ScenarioConfig::bundled("case1").expect("bundled scenario parses");
    let scenario = c.scenario().expect("bundled scenario is valid");
    let mut spec = c.design;
    spec.cost = if nis { CostKind::Nis } else { CostKind::Nees };
    let config = TunerConfig {
        master_seed: u64::from(seed),
        n_runs: n_runs.clamp(1, 200),
        ..c.tuner
    };
    (spec, config, scenario)
}

fn grid(points: usize) -> Vec<f64> {
    let n = points.clamp(2, 1000);
    (0..n).map(|i| V_MAX * i as f64 / (n - 1) as f64).collect()
}

/// Evenly spaced V values on `[0, V_MAX]`.
#[wasm_bindgen]
pub fn v_grid(points: usize) -> Vec<f64> {
    grid(points)
}

/// Consistency cost at each point of [`v_grid`], all on the same Monte Carlo
/// trajectories.
#[wasm_bindgen]
pub fn cost_landscape(seed: u32, n_runs: usize, nis: bool, points: usize) -> Vec<f64> {
    let (spec, config, scenario) = case1(seed, n_runs, nis);
    grid(points)
        .iter()
        .map(|&v| evaluate_cost(&[v], &spec, &config, &scenario, 0))
        .collect()
}

/// Averaged NEES/NIS over time for a filter built with intensity `v`.
#[wasm_bindgen]
pub struct Trace {
    record: ConsistencyRecord,
}

#[wasm_bindgen]
impl Trace {
    #[wasm_bindgen(constructor)]
    pub fn new(v: f64, seed: u32, n_runs: usize) -> Trace {
        let (spec, config, scenario) = case1(seed, n_runs, false);
        let v = if v.is_finite() { v.clamp(0.0, V_MAX) } else { 1.0 };
        let record = scenario
            .consistency(&[v], &spec, &config, 0)
            .expect("R = 1 keeps S positive definite");
        Trace { record }
    }

    pub fn avg_nees(&self) -> Vec<f64> {
        self.record.avg_nees.clone()
    }

    pub fn avg_nis(&self) -> Vec<f64> {
        self.record.avg_nis.clone()
    }

    /// `[lower, upper]` χ² bounds for the averaged NEES.
    pub fn nees_bounds(&self) -> Vec<f64> {
        vec![self.record.bounds_nees.0, self.record.bounds_nees.1]
    }

    pub fn nis_bounds(&self) -> Vec<f64> {
        vec![self.record.bounds_nis.0, self.record.bounds_nis.1]
    }

    pub fn j_nees(&self) -> f64 {
        self.record.j_nees
    }

    pub fn j_nis(&self) -> f64 {
        self.record.j_nis
    }

    pub fn fraction_inside(&self) -> f64 {
        self.record.nees_fraction_inside()
    }
}

/// A tuning session over V that advances one evaluation per [`Stepper::step`].
#[wasm_bindgen]
pub struct Stepper {
    tuner: Tuner,
}

#[wasm_bindgen]
impl Stepper {
    /// Evaluates the seed design; `max_iterations` caps the later steps.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_runs: usize, nis: bool, max_iterations: usize) -> Stepper {
        let (spec, mut config, scenario) = case1(seed, n_runs, nis);
        config.max_iterations = max_iterations.clamp(1, 200);
        Stepper {
            tuner: Tuner::new(&spec, &config, &scenario).expect("bundled tuner settings are valid"),
        }
    }

    /// Runs one iteration; false once the session has finished.
    pub fn step(&mut self) -> bool {
        matches!(self.tuner.step(), Ok(Some(_)))
    }

    pub fn iteration(&self) -> usize {
        self.tuner.iterations()
    }

    pub fn finished(&self) -> bool {
        self.tuner.stop_reason().is_some()
    }

    pub fn sampled_v(&self) -> Vec<f64> {
        self.tuner.history().iter().map(|e| e.q[0]).collect()
    }

    pub fn sampled_cost(&self) -> Vec<f64> {
        self.tuner.history().iter().map(|e| e.cost).collect()
    }

    pub fn incumbent_v(&self) -> f64 {
        let h = self.tuner.history();
        let best = h
            .iter()
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
            .expect("seeds evaluated");
        best.q[0]
    }

    pub fn incumbent_cost(&self) -> f64 {
        self.tuner.history().last().map_or(f64::NAN, |e| e.incumbent_cost)
    }

    /// Surrogate mean, standard deviation and Expected Improvement on
    /// [`v_grid`], concatenated (`3 × points` values).
    pub fn surrogate(&self, points: usize) -> Vec<f64> {
        let xs = grid(points);
        let Ok(model) = self.tuner.surrogate() else {
            return vec![f64::NAN; 3 * xs.len()];
        };
        let bounds = self.tuner.bounds();
        let f_best = self.incumbent_cost();
        let mut mu = Vec::with_capacity(xs.len());
        let mut sd = Vec::with_capacity(xs.len());
        let mut ei = Vec::with_capacity(xs.len());
        for &v in &xs {
            let u = bounds.to_unit(&[v]);
            let (m, var) = model.predict(&u);
            mu.push(m);
            sd.push(var.sqrt());
            ei.push(kftune::acquisition::expected_improvement(&u, &model, f_best));
        }
        mu.extend(sd);
        mu.extend(ei);
        mu
    }
}
