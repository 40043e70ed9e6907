//! `icl` — config-driven driver for the select-then-rank in-context learning
//! engine: evaluation runs, hyperparameter sweeps, config validation, and
//! report summaries.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{cmd_report, cmd_run, cmd_sweep, cmd_validate, CliError};
use config::{load_config, resolve, Overrides};
use icl_core::eval::SweepAxis;

#[derive(Parser)]
#[command(
    name = "icl",
    version,
    about = "Select-then-rank in-context example engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one method over the test set, one report per seed.
    Run {
        /// Path to the JSON run config.
        #[arg(long, short = 'c')]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-run the evaluation along one axis (window, shots, candidates,
    /// pool-size) and write a combined CSV.
    Sweep {
        #[arg(long, short = 'c')]
        config: PathBuf,
        /// Axis to vary.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Dry-run checks: templates render, embeddings line up, the backend
    /// answers a probe; prints one assembled prompt.
    Validate {
        #[arg(long, short = 'c')]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Summarize existing report JSON files (or directories of them).
    Report {
        /// Report files or directories containing report_*.json.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate a seeded synthetic task (datasets, embeddings, task config)
    /// for smoke runs and demos.
    Synth {
        /// Directory to write the files into.
        #[arg(long, short = 'o')]
        output: PathBuf,
        #[arg(long, default_value_t = 2)]
        labels: usize,
        #[arg(long = "pool", default_value_t = 120)]
        pool_size: usize,
        #[arg(long = "test", default_value_t = 200)]
        test_size: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, overrides } => with_resolved(config, overrides, cmd_run),
        Command::Sweep {
            config,
            axis,
            values,
            overrides,
        } => with_resolved(config, overrides, |resolved| {
            let axis: SweepAxis = axis
                .parse()
                .map_err(|e: icl_core::error::EvalError| CliError::Config(e.to_string()))?;
            cmd_sweep(resolved, axis, values)
        }),
        Command::Validate { config, overrides } => with_resolved(config, overrides, cmd_validate),
        Command::Report { paths, csv } => cmd_report(paths, csv.as_deref()),
        Command::Synth {
            output,
            labels,
            pool_size,
            test_size,
            dim,
            noise,
            seed,
        } => commands::cmd_synth(
            output,
            icl_core::fixture::SyntheticSpec {
                labels: *labels,
                pool_size: *pool_size,
                test_size: *test_size,
                dim: *dim,
                noise: *noise,
                seed: *seed,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn with_resolved(
    config_path: &PathBuf,
    overrides: &Overrides,
    f: impl FnOnce(&config::ResolvedRun) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path).map_err(|e| {
        CliError::Config(format!(
            "cannot read config `{}`: {e}",
            config_path.display()
        ))
    })?;
    let file = load_config(config_path).map_err(CliError::Config)?;
    let resolved = resolve(file, overrides, &text).map_err(CliError::Config)?;
    f(&resolved)
}
