//! `canopy` — batch workflows for the canopy-height toolkit: synthetic data,
//! pretraining, growth fine-tuning, pseudo-labels, disturbance maps,
//! evaluation, footprint geometry and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod manifest;
mod schema;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    DescribeArgs, DisturbanceArgs, EvaluateArgs, FootprintArgs, GradcheckArgs, PredictArgs, PseudolabelArgs,
    SynthArgs,
};
use train::{FinetuneArgs, PretrainArgs};

#[derive(Debug, Parser)]
#[command(name = "canopy", version, about = "Canopy-height time-series toolkit", long_about = schema::OVERVIEW)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic patches from a world config.
    #[command(after_long_help = schema::WORLD)]
    Synth(SynthArgs),
    /// Print the per-stage tensor shapes of a model config.
    #[command(after_long_help = schema::MODEL)]
    Describe(DescribeArgs),
    /// Pretrain the backbone and reference head on sparse labels (masked Huber loss).
    #[command(after_long_help = schema::PRETRAIN)]
    Pretrain(PretrainArgs),
    /// Fine-tune the prediction head on growth pseudo-labels with a frozen backbone.
    #[command(after_long_help = schema::FINETUNE)]
    Finetune(FinetuneArgs),
    /// Run a checkpoint over patches and write yearly height grids.
    Predict(PredictArgs),
    /// Build pseudo-labels for height series given as CSV rows.
    #[command(after_long_help = schema::GROWTH)]
    Pseudolabel(PseudolabelArgs),
    /// Compute the pooled disturbance map of a height grid.
    #[command(after_long_help = schema::GROWTH)]
    Disturbance(DisturbanceArgs),
    /// Compare prediction grids against labeled patches.
    Evaluate(EvaluateArgs),
    /// Gaussian footprint mass over a region, or solve sigma from a center fraction.
    Footprint(FootprintArgs),
    /// Finite-difference check of the model's analytic gradients (64-bit).
    #[command(after_long_help = schema::MODEL)]
    Gradcheck(GradcheckArgs),
}

/// Errors caused by how the tool was invoked (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check that ran to completion but failed its tolerance (exit code 3).
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use canopy_core::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if cause.is::<NumericalFailure>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numerical(_) | E::NonFiniteGradient(_) => 3,
                E::Config(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Synth(a) => commands::synth(a, &argv),
        Command::Describe(a) => commands::describe(a),
        Command::Pretrain(a) => train::pretrain(a, &argv),
        Command::Finetune(a) => train::finetune(a, &argv),
        Command::Predict(a) => commands::predict(a, &argv),
        Command::Pseudolabel(a) => commands::pseudolabel(a, &argv),
        Command::Disturbance(a) => commands::disturbance(a, &argv),
        Command::Evaluate(a) => commands::evaluate(a, &argv),
        Command::Footprint(a) => commands::footprint(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
