//! `fluidctl`: train, evaluate and verify fluid-immersed body controllers.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use fluidctl_core::environment::EnvironmentId;
use fluidctl_core::losses::Ablation;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fluidctl", version, about = "Controllers for rigid bodies immersed in a 2D fluid")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy by differentiating through the simulator.
    Train(TrainArgs),
    /// Generate a supervised dataset from prescribed trajectories.
    Dataset(DatasetArgs),
    /// Fit a policy to a supervised dataset.
    TrainSupervised(SupervisedArgs),
    /// Run test schedules and compare controllers.
    Eval(EvalArgs),
    /// Run the built-in oracle suites.
    Verify(VerifyArgs),
}

/// Flags shared by every run command.
#[derive(Debug, Args)]
struct RunArgs {
    /// Environment: BaseNR, BuoyNR, Base, Inflow, InBuoy or Hold.
    #[arg(long)]
    env: EnvironmentId,

    /// TOML config file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Random seed; falls back to FLUIDCTL_SEED, then the config file.
    #[arg(long, env = "FLUIDCTL_SEED")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Grid cells per side.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,

    /// Loss horizon l in steps.
    #[arg(long)]
    horizon: Option<usize>,

    /// Optimizer updates.
    #[arg(long)]
    iters: Option<usize>,

    /// Loss terms kept: OVE, OV, OE or O.
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[command(flatten)]
    run: RunArgs,

    /// Number of prescribed-trajectory simulations.
    #[arg(long)]
    sims: Option<usize>,

    /// Control steps per simulation.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct SupervisedArgs {
    #[command(flatten)]
    run: RunArgs,

    /// Existing dataset; generated into the output directory when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,

    /// Simulations to generate when no dataset is given.
    #[arg(long)]
    sims: Option<usize>,

    /// Control steps per generated simulation.
    #[arg(long)]
    steps: Option<usize>,

    /// Optimizer updates.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,

    /// Controller to test: diff, sup, pid or ls (repeatable).
    #[arg(long = "controller", required = true)]
    controllers: Vec<String>,

    /// Checkpoint for each learned controller, in the order they are listed.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,

    /// Test schedule: random, n-shape or hold.
    #[arg(long)]
    schedule: Option<String>,

    /// Random test simulations.
    #[arg(long)]
    sims: Option<usize>,

    /// Worker threads for rollouts.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Pressure solver tolerance used by the projection suite.
    #[arg(long)]
    projection_tol: Option<f64>,

    /// Seeds of the coupled gradient suite.
    #[arg(long, default_value_t = 3)]
    gradient_seeds: usize,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    let result: Result<(), CliError> = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Dataset(a) => commands::dataset(a),
        Command::TrainSupervised(a) => commands::train_supervised(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
