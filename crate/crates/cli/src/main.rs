use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use amtma::AmtError;

mod commands;
mod output;

#[derive(Parser, Debug)]
#[command(name = "amtma", version, about = "Stable transport meta-analysis")]
struct Cli {
    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true, env = "AMTMA_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit classical and AMT estimators with diagnostics.
    Fit(FitArgs),
    /// Perturbation-bootstrap interval for the target effect.
    Bootstrap(BootstrapArgs),
    /// Sign stability, abstention and per-regime effects.
    Diagnose(DiagnoseArgs),
    /// Leave-one-study-out selection of rho and lambda_gamma.
    Tune(TuneArgs),
    /// Run the six-scenario simulation study.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum ScaleArg {
    Rd,
    Logor,
}

impl From<ScaleArg> for amtma::EffectScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Rd => amtma::EffectScale::RiskDifference,
            ScaleArg::Logor => amtma::EffectScale::LogOddsRatio,
        }
    }
}

#[derive(Args, Debug, Clone, serde::Serialize)]
struct DataArgs {
    /// Trial-level CSV.
    #[arg(long)]
    data: PathBuf,
    /// Effect scale of the data.
    #[arg(long, value_enum, default_value = "logor")]
    scale: ScaleArg,
    /// Add 0.5 to every cell of count rows with a zero cell.
    #[arg(long)]
    continuity_correction: bool,
}

#[derive(Args, Debug, Clone, serde::Serialize)]
struct ModelArgs {
    /// Target JSON `{"z_bar": [1, ...]}`; may be omitted for intercept-only data.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda_gamma: Option<f64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    /// Clinical null band (default 0.005 on rd, 0 on logor).
    #[arg(long)]
    delta: Option<f64>,
    /// Abstention threshold on sign stability.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    minority_frac: Option<f64>,
}

#[derive(Args, Debug, serde::Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Bootstrap replicates for the AMT interval (0 disables).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    /// Re-select rho and lambda_gamma on each bootstrap replicate.
    #[arg(long)]
    reselect: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write forest-plot rows to this CSV.
    #[arg(long)]
    forest: Option<PathBuf>,
}

#[derive(Args, Debug, serde::Serialize)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Replicates.
    #[arg(long = "replicates", short = 'B', default_value_t = 500)]
    replicates: usize,
    #[arg(long)]
    reselect: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, serde::Serialize)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, serde::Serialize)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// `default`, or `rho=0,0.2;lambda=0.1,1`.
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, default_value_t = 0.90)]
    quantile: f64,
    /// Apply the one-standard-error rule.
    #[arg(long)]
    one_se: bool,
    #[arg(long, default_value_t = 200)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, serde::Serialize)]
struct SimulateArgs {
    /// Scenario name, comma-separated list, or `all`.
    #[arg(long, default_value = "all")]
    scenario: String,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 24)]
    trials: usize,
    #[arg(long, default_value_t = 20240601)]
    seed: u64,
    /// Run the bootstrap coverage sub-study.
    #[arg(long)]
    coverage: bool,
    #[arg(long, default_value_t = 100)]
    coverage_reps: usize,
    #[arg(long, default_value_t = 30)]
    coverage_boot: usize,
    /// Also write one row per replication and method.
    #[arg(long)]
    raw: bool,
    /// Alternative scenario-constants TOML.
    #[arg(long)]
    constants: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!(AmtError::InvalidArgument("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    let workers = cli.workers.unwrap_or_else(rayon::current_num_threads);
    match cli.command {
        Command::Fit(a) => commands::fit(a, started),
        Command::Bootstrap(a) => commands::bootstrap(a, started),
        Command::Diagnose(a) => commands::diagnose(a, started),
        Command::Tune(a) => commands::tune(a, started),
        Command::Simulate(a) => commands::simulate(a, workers, started),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = match err.downcast_ref::<AmtError>() {
                Some(e) => (e.kind(), 2),
                None if err.downcast_ref::<std::io::Error>().is_some() => ("Io", 2),
                None => ("Error", 1),
            };
            let msg = format!("{err:#}");
            println!("{}", serde_json::json!({ "error": { "kind": kind, "message": msg } }));
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
