//! `mscp`: generate data, train per-scale models, predict multi-scale sets
//! and run the Monte Carlo studies.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime or data errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mscp", version, about = "Multi-scale conformal prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// JSON file with flat config keys; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Existing output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Print machine-readable JSON to stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Sweep,
    NoiseTable,
    Dependence,
    Asymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Alloc {
    Uniform,
    Optimal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset to `dataset.csv`.
    Generate {
        #[command(flatten)]
        shared: Shared,
    },
    /// Train one softmax model per scale and write `models.json`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Per-scale and multi-scale prediction sets for one point.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum)]
        alloc: Option<Alloc>,
        /// Row of the dataset to predict.
        #[arg(long, conflicts_with = "x", required_unless_present = "x")]
        index: Option<usize>,
        /// Comma-separated feature vector.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<String>,
        /// `models.json` from `train`; trains afresh when absent.
        #[arg(long)]
        models: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Run one Monte Carlo study and write its CSV and sidecar JSON.
    Study {
        #[arg(value_enum)]
        name: Study,
        #[command(flatten)]
        shared: Shared,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate { shared } => commands::generate(&shared),
        Command::Train { data, shared } => commands::train(&data, &shared),
        Command::Predict { data, alpha, alloc, index, x, models, shared } => commands::predict(
            &commands::PredictArgs { data, alpha, alloc, index, x, models },
            &shared,
        ),
        Command::Study { name, shared } => commands::study(name, &shared),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
