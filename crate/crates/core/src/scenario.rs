//! Scenario configuration files and tuning-run artifacts.
//!
//! A scenario is a TOML document with a true model, a control profile, the
//! design parameters to tune and the tuner settings. [`run_scenario`] tunes it
//! and writes `history.csv`, `surrogate_grid.csv`, `consistency.csv` and
//! `session.json` into an output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyRecord;
use crate::error::{Error, Result};
use crate::kalman::GaussianBelief;
use crate::lti::ContinuousModel;
use crate::sim::ControlProfile;
use crate::tuner::{run_gpbo, DesignSpec, Scenario, StopReason, TunerConfig, TuningSession, SEED_DESIGN_STREAM};

const CASE1: &str = include_str!("../configs/case1.toml");
const CASE2: &str = include_str!("../configs/case2.toml");

/// Names accepted by [`ScenarioConfig::bundled`].
pub const BUNDLED: [&str; 2] = ["case1", "case2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dt: f64,
    pub a: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    /// True continuous process noise intensity.
    pub v: Vec<Vec<f64>>,
    /// True continuous measurement noise intensity.
    pub w: Vec<Vec<f64>>,
    /// Initial mean; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Initial covariance; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub control: ControlProfile,
    pub design: DesignSpec,
    #[serde(default)]
    pub tuner: TunerConfig,
    /// Where the CLI writes artifacts unless told otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

const REQUIRED: [(&str, &[&str]); 3] = [
    ("name", &[]),
    ("model", &["dt", "a", "g", "gamma", "h", "v", "w"]),
    ("design", &["parameters"]),
];

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::Dimension(format!("model.{name} is empty")));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!("model.{name} has rows of different lengths")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Parses and validates a scenario document. Missing required fields are
/// listed together; unknown fields are rejected.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut missing = Vec::new();
    for (section, keys) in REQUIRED {
        match table.get(section) {
            None => {
                if keys.is_empty() {
                    missing.push(section.to_string());
                } else {
                    missing.extend(keys.iter().map(|k| format!("{section}.{k}")));
                }
            }
            Some(toml::Value::Table(t)) => {
                missing.extend(
                    keys.iter()
                        .filter(|k| !t.contains_key(**k))
                        .map(|k| format!("{section}.{k}")),
                );
            }
            Some(_) => {}
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing required fields: {}",
            missing.join(", ")
        )));
    }
    let config: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.scenario()?;
    Ok(config)
}

impl ScenarioConfig {
    /// One of the scenarios shipped with the crate (see [`BUNDLED`]).
    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "case1" => parse_config(CASE1),
            "case2" => parse_config(CASE2),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}`, expected one of {BUNDLED:?}"
            ))),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        parse_config(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Builds and validates the simulation scenario, design and tuner
    /// settings together.
    pub fn scenario(&self) -> Result<Scenario> {
        let m = &self.model;
        if !(m.dt.is_finite() && m.dt > 0.0) {
            return Err(Error::invalid(
                "model.dt",
                format!("must be positive and finite, got {}", m.dt),
            ));
        }
        let truth = ContinuousModel::new(
            matrix("a", &m.a)?,
            matrix("g", &m.g)?,
            matrix("gamma", &m.gamma)?,
            matrix("h", &m.h)?,
            matrix("v", &m.v)?,
            matrix("w", &m.w)?,
            m.dt,
        )?;
        let n = truth.state_dim();
        let mean = match &m.x0 {
            Some(x) => DVector::from_column_slice(x),
            None => DVector::zeros(n),
        };
        let cov = match &m.p0 {
            Some(p) => matrix("p0", p)?,
            None => DMatrix::identity(n, n),
        };
        if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "model.x0 and model.p0 must match the {n}-dimensional state"
            )));
        }
        if !(self.control.amplitude.is_finite() && self.control.omega.is_finite()) {
            return Err(Error::NonFinite("control"));
        }
        let scenario = Scenario::new(truth, GaussianBelief::new(mean, cov)?, self.control)?;
        self.design.validate(&scenario.truth)?;
        self.tuner.validate(self.design.dim())?;
        Ok(scenario)
    }
}

/// Result of [`run_scenario`].
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub session: TuningSession,
    pub truth: Vec<f64>,
    /// Consistency of the incumbent under its own evaluation streams.
    pub incumbent_consistency: ConsistencyRecord,
    pub wall_time_s: f64,
}

impl ScenarioOutcome {
    pub fn distance_to_truth(&self) -> f64 {
        let q = &self.session.incumbent().q;
        q.iter()
            .zip(&self.truth)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Summary written to `session.json`; `config` echoes the full scenario with
/// defaults filled in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionReport {
    pub config: ScenarioConfig,
    pub master_seed: u64,
    pub seed_design_stream: u64,
    pub evaluations: usize,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub incumbent_q: Vec<f64>,
    pub incumbent_cost: f64,
    pub incumbent_eval_index: u64,
    pub truth_q: Vec<f64>,
    pub distance_to_truth: f64,
    pub hyperparams: crate::gp::Hyperparams,
    pub wall_time_s: f64,
}

/// Tunes a scenario; when `out_dir` is given, writes the run artifacts there.
pub fn run_scenario(config: &ScenarioConfig, out_dir: Option<&Path>) -> Result<ScenarioOutcome> {
    let scenario = config.scenario()?;
    let start = Instant::now();
    let session = run_gpbo(&config.design, &config.tuner, &scenario)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let inc = session.incumbent().clone();
    let incumbent_consistency = scenario.consistency(&inc.q, &config.design, &config.tuner, inc.eval_index)?;
    let outcome = ScenarioOutcome {
        truth: scenario.truth_point(&config.design),
        session,
        incumbent_consistency,
        wall_time_s,
    };
    if let Some(dir) = out_dir {
        write_artifacts(config, &outcome, dir)?;
    }
    Ok(outcome)
}

pub fn write_artifacts(config: &ScenarioConfig, outcome: &ScenarioOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let session = &outcome.session;
    session.write_history_csv(BufWriter::new(File::create(dir.join("history.csv"))?))?;
    session.write_surrogate_grid_csv(
        config.tuner.grid_points,
        BufWriter::new(File::create(dir.join("surrogate_grid.csv"))?),
    )?;
    outcome
        .incumbent_consistency
        .write_csv(BufWriter::new(File::create(dir.join("consistency.csv"))?))?;
    let inc = session.incumbent();
    let report = SessionReport {
        config: config.clone(),
        master_seed: config.tuner.master_seed,
        seed_design_stream: SEED_DESIGN_STREAM,
        evaluations: session.history.len(),
        iterations: session.iterations,
        stop_reason: session.stop_reason,
        incumbent_q: inc.q.clone(),
        incumbent_cost: inc.cost,
        incumbent_eval_index: inc.eval_index,
        truth_q: outcome.truth.clone(),
        distance_to_truth: outcome.distance_to_truth(),
        hyperparams: session.hyper,
        wall_time_s: outcome.wall_time_s,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("session.json"), json + "\n")?;
    Ok(())
}
