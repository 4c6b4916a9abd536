//! `cardest`: train, query, benchmark, and maintain cardinality estimators
//! built from overlapping low-rank count-tensor models.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 data or i/o error,
//! 4 infeasible covering, 5 numeric failure during fitting.

mod config;
mod ops;

use clap::{Parser, Subcommand};

use crate::config::{BenchArgs, EstimateArgs, InspectArgs, TrainArgs, UpdateArgs, VerifyCoverArgs};

#[derive(Parser)]
#[command(
    name = "cardest",
    version,
    about = "Cardinality estimation over CP-decomposed count tensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a CSV and train an estimator index.
    Train(TrainArgs),
    /// Answer a single query from a trained index.
    Estimate(EstimateArgs),
    /// Measure accuracy and cost over a workload.
    Bench(BenchArgs),
    /// Refresh an index against new data, cheaply or by warm retraining.
    Update(UpdateArgs),
    /// Check a covering design file for validity and budget.
    VerifyCover(VerifyCoverArgs),
    /// Summarize a trained index.
    Inspect(InspectArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => ops::train(args),
        Command::Estimate(args) => ops::estimate(args),
        Command::Bench(args) => ops::bench(args),
        Command::Update(args) => ops::update(args),
        Command::VerifyCover(args) => ops::verify_cover(args),
        Command::Inspect(args) => ops::inspect(args),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

#[allow(dead_code)]
fn assert_cli_is_well_formed() {
    use clap::CommandFactory;
    Cli::command().debug_assert();
}
