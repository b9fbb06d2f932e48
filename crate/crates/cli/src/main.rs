//! `actsense` command-line simulator.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, config entries or values. Exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "actsense", version, about = "Active sensor deployment simulator")]
struct Cli {
    /// Log progress (-v) or debug detail (-vv) to stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic low-rank dataset as CSV, plus a manifest.
    Generate(GenerateArgs),
    /// Run the month-by-month deployment simulation on each fold.
    Simulate(SimulateArgs),
    /// Compare report sets against a baseline.
    Compare(CompareArgs),
    /// Year RMSE against the monthly budget L.
    Sweep(SweepArgs),
    /// Cross-validated hyperparameter search.
    Gridsearch(GridArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    pub homes: u64,
    /// Breakdown appliances, not counting the aggregate.
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(1..))]
    pub appliances: u64,
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    pub months: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub rank: u64,
    /// Noise standard deviation relative to the mean reading.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// sinusoidal, flat or file:<path>
    #[arg(long, default_value = "sinusoidal")]
    pub season: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Options shared by the commands that run simulations.
#[derive(Args)]
pub struct RunArgs {
    /// Dataset CSV (home_id,appliance,month,kwh).
    #[arg(long)]
    pub data: PathBuf,
    /// key=value settings file; flags take priority over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Run only this fold (0-based).
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub months: Option<usize>,
    /// current, current-future or full
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Sets all three regularization weights.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Half-width of the temporal kernel, in months.
    #[arg(long)]
    pub sigma: Option<usize>,
    /// QBC committee ranks, e.g. 1,2,3,4
    #[arg(long)]
    pub committee: Option<String>,
    #[arg(long)]
    pub min_coverage: Option<f64>,
    /// Previous year's CSV; its aggregate bills give the season prior.
    #[arg(long)]
    pub prior_data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl RunArgs {
    fn flags(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("folds", self.folds.map(|v| v.to_string()));
        push("months", self.months.map(|v| v.to_string()));
        push("mode", self.mode.clone());
        push("rank", self.rank.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("sigma", self.sigma.map(|v| v.to_string()));
        push("committee", self.committee.clone());
        push("min_coverage", self.min_coverage.map(|v| v.to_string()));
        out
    }
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// actsense, random or qbc
    #[arg(long)]
    pub strategy: Option<String>,
    /// Pairs installed per month.
    #[arg(long = "L")]
    pub budget: Option<usize>,
    /// Repeat with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    /// Re-rank after each pick within a month.
    #[arg(long)]
    pub sequential: bool,
    /// Output directory for the JSON reports.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct CompareArgs {
    /// NAME=PATH, where PATH is a report file or a directory of them.
    #[arg(long)]
    pub baseline: String,
    /// NAME=PATH; repeat for each method.
    #[arg(long = "method", required = true)]
    pub methods: Vec<String>,
    /// Output directory for monthly.csv and summary.csv.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "actsense,random,qbc")]
    pub strategies: String,
    /// Budgets: 5, 1,5,10 or 1..20
    #[arg(long = "L", default_value = "1..20")]
    pub budgets: String,
    /// Seeds per (strategy, L, fold), counting up from --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Output CSV of mean Year RMSE per (strategy, L).
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, default_value = "1..4")]
    pub ranks: String,
    #[arg(long, default_value = "5000,8000,10000")]
    pub lambdas: String,
    #[arg(long, default_value = "1,3,6,12")]
    pub sigmas: String,
    #[arg(long = "L", default_value = "5")]
    pub budgets: String,
    /// Output directory for grid.csv and best.cfg.
    #[arg(short, long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let outcome = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Gridsearch(a) => commands::gridsearch(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
