//! `fmwc`: train flow-matching models with single-pass confidence on the
//! checkerboard, sample from them, score and filter samples, and collect
//! the results into tables and figures.
//!
//! Exit codes: 0 success, 2 usage, 3 numerical failure, 4 corrupt artifact.

mod artifacts;
mod commands;
mod config;
mod error;
mod figures;

use clap::{Parser, Subcommand};

use crate::commands::*;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "fmwc", version, about = "Flow matching with single-pass confidence")]
struct Cli {
    /// Worker threads for batch evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `model.fmwc.json` and `train_log.csv`.
    Train(TrainArgs),
    /// Sample from a checkpoint; writes samples, variances and quality.
    Generate(GenerateArgs),
    /// Recompute readouts for a `generate` directory.
    Score(ScoreArgs),
    /// Confidence-guided filtering: AUPRC per readout.
    Filter(FilterArgs),
    /// Variance-guided editing against random edit times.
    Edit(EditArgs),
    /// Misplacement per step controller and budget.
    Adapt(AdaptArgs),
    /// Variance/divergence agreement, probe sweep and cost.
    Diagnose(DiagnoseArgs),
    /// Merge report tables under a directory.
    Report(ReportArgs),
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    eprintln!("note: built without the parallel feature; --threads {n} ignored");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Score(a) => cmd_score(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
