//! `transmod`: fit, tree, forest, simulate and predict from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "transmod", version, about = "Conditional transformation models for continuous responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a transformation model: params.json, summary.txt, curves.csv.
    Fit(FitArgs),
    /// Grow a transformation tree: model.json, importance.csv, pdp.csv.
    Tree(TreeArgs),
    /// Grow a transformation forest: model.json, importance.csv, pdp.csv.
    Forest(ForestArgs),
    /// Draw a synthetic health-survey data set.
    Simulate(SimulateArgs),
    /// Distribution curves of a fitted model for given profiles.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Model formula, e.g. `bmi ~ bernstein(5) | strata(sex) + shift(age)`.
    #[arg(long)]
    pub formula: String,
    /// Column holding sampling weights.
    #[arg(long)]
    pub weights: Option<String>,
    /// Level order of a categorical column, `col=a,b,c`; repeatable.
    #[arg(long = "levels", value_name = "COL=LEVELS")]
    pub levels: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; falls back to TRANSMOD_THREADS, then all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Confidence level of the intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Empirical vs fitted CDFs per cell, `strata=sex,smoking`.
    #[arg(long)]
    pub overlay: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PValues {
    /// Monte-Carlo permutation p-values.
    Permutation,
    /// Bonferroni-adjusted normal approximation.
    Asymptotic,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// Split variables, comma separated; default all non-response columns.
    #[arg(long)]
    pub vars: Option<String>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Partial dependence deciles, `vars=sex,smoking,age`.
    #[arg(long)]
    pub pdp: Option<String>,
    /// Training rows averaged per partial-dependence point.
    #[arg(long, default_value_t = 25)]
    pub pdp_rows: usize,
    /// Grid points of numeric partial-dependence variables.
    #[arg(long, default_value_t = 10)]
    pub pdp_points: usize,
    /// Permutations per variable for the importance table.
    #[arg(long, default_value_t = 5)]
    pub permutations: usize,
    /// Importance on out-of-bag rows.
    #[arg(long)]
    pub oob: bool,
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub part: PartitionArgs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 200.0)]
    pub min_split: f64,
    #[arg(long, default_value_t = 70.0)]
    pub min_bucket: f64,
    #[arg(long, value_enum, default_value_t = PValues::Permutation)]
    pub pvalues: PValues,
    #[arg(long, default_value_t = 9999)]
    pub resamples: usize,
}

#[derive(Debug, Args)]
pub struct ForestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub part: PartitionArgs,
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    /// Subsample fraction, without replacement.
    #[arg(long, default_value_t = 0.632)]
    pub fraction: f64,
    /// Candidate variables per node: a number or `all`.
    #[arg(long)]
    pub mtry: Option<String>,
    /// Significance level of the trees; 1 disables the gate.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 40.0)]
    pub min_split: f64,
    #[arg(long, default_value_t = 20.0)]
    pub min_bucket: f64,
    #[arg(long, value_enum, default_value_t = PValues::Asymptotic)]
    pub pvalues: PValues,
    #[arg(long, default_value_t = 9999)]
    pub resamples: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 5000)]
    pub n: i64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Size of all effects, between 0 (one common distribution) and 1.
    #[arg(long, default_value_t = 1.0)]
    pub effects: f64,
    /// Draw unequal sampling weights.
    #[arg(long)]
    pub survey_weights: bool,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output CSV file.
    #[arg(long, default_value = "simulated.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// params.json written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// Covariate values, `sex=male,age=30`; repeatable.
    #[arg(long)]
    pub profile: Vec<String>,
    /// Comma-separated functionals: cdf, density, survivor, odds, hazard,
    /// cum_hazard, quantile.
    #[arg(long, default_value = "cdf,density,quantile")]
    pub functionals: String,
    #[arg(long, default_value_t = 100)]
    pub grid_points: usize,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// A failed run: user errors exit with 2, numerical failures with 3.
#[derive(Debug)]
pub enum Failure {
    User(String),
    Numeric(String),
}

impl Failure {
    pub fn user(msg: impl Into<String>) -> Self {
        Failure::User(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Failure::Numeric(msg.into())
    }
}

fn set_threads(threads: Option<usize>) -> Result<(), Failure> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("TRANSMOD_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Failure::user(format!("TRANSMOD_THREADS={v:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::user("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::user(format!("cannot start {n} threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit(a) => {
            set_threads(a.run.threads)?;
            commands::fit(&a)
        }
        Command::Tree(a) => {
            set_threads(a.run.threads)?;
            commands::tree(&a)
        }
        Command::Forest(a) => {
            set_threads(a.run.threads)?;
            commands::forest(&a)
        }
        Command::Simulate(a) => {
            set_threads(a.threads)?;
            commands::simulate(&a)
        }
        Command::Predict(a) => {
            set_threads(a.threads)?;
            commands::predict(&a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
