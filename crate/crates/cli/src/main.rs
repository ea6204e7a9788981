use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use kftune::scenario::{run_scenario, ScenarioConfig};
use kftune::tuner::CostKind;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioName {
    Case1,
    Case2,
    Custom,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cost {
    Nees,
    Nis,
}

/// Tune Kalman filter noise covariances by Bayesian optimization of
/// NEES/NIS consistency.
#[derive(Debug, Parser)]
#[command(name = "kftune", version)]
struct Args {
    /// Scenario TOML file; overrides the bundled scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled scenario to run; `custom` requires --config.
    #[arg(long, value_enum, default_value = "case1")]
    scenario: ScenarioName,
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of optimization iterations after the seed design.
    #[arg(long)]
    iters: Option<usize>,
    /// Consistency statistic to tune against.
    #[arg(long, value_enum)]
    cost: Option<Cost>,
    /// Directory for history.csv, surrogate_grid.csv, consistency.csv and
    /// session.json; defaults to the config's output_dir, then
    /// out/<scenario name>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn load(args: &Args) -> kftune::Result<ScenarioConfig> {
    let mut config = match (&args.config, args.scenario) {
        (Some(path), _) => ScenarioConfig::from_file(path)?,
        (None, ScenarioName::Case1) => ScenarioConfig::bundled("case1")?,
        (None, ScenarioName::Case2) => ScenarioConfig::bundled("case2")?,
        (None, ScenarioName::Custom) => {
            return Err(kftune::Error::Config("--scenario custom needs --config <file>".into()));
        }
    };
    if let Some(seed) = args.seed {
        config.tuner.master_seed = seed;
    }
    if let Some(iters) = args.iters {
        config.tuner.max_iterations = iters;
    }
    if let Some(cost) = args.cost {
        config.design.cost = match cost {
            Cost::Nees => CostKind::Nees,
            Cost::Nis => CostKind::Nis,
        };
    }
    config.scenario()?;
    Ok(config)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("kftune: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name));
    let outcome = match run_scenario(&config, Some(&out_dir)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("kftune: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };

    let session = &outcome.session;
    let inc = session.incumbent();
    let names: Vec<&str> = config.design.parameters.iter().map(|p| p.name.as_str()).collect();
    println!("scenario      {}", config.name);
    println!(
        "evaluations   {} ({} iterations, {:?})",
        session.history.len(),
        session.iterations,
        session.stop_reason
    );
    for ((name, q), t) in names.iter().zip(&inc.q).zip(&outcome.truth) {
        println!("{name:<13} {q:.6}  (truth {t:.6})");
    }
    println!("cost          {:.6}", inc.cost);
    println!("distance      {:.6}", outcome.distance_to_truth());
    println!("wall time     {:.2} s", outcome.wall_time_s);
    println!("artifacts     {}", out_dir.display());
    ExitCode::SUCCESS
}
