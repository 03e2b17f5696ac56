//! `usgan`: corpus generation, training, synthesis and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.

mod commands;
mod run_config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, MakeToyDataArgs, SynthArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "usgan", version, about = "Expression synthesis GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural sprite corpus and its manifest.
    MakeToyData(MakeToyDataArgs),
    /// Train from a run configuration file.
    Train(TrainArgs),
    /// Synthesize every target expression for input images.
    Synth(SynthArgs),
    /// Score a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Print the documented default run configuration.
    DefaultConfig,
}

/// A failed command and the exit code it maps to.
pub enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeToyData(a) => commands::make_toy_data(a),
        Command::Train(a) => commands::train(a),
        Command::Synth(a) => commands::synth(a),
        Command::Eval(a) => commands::eval(a),
        Command::DefaultConfig => {
            print!("{}", run_config::TEMPLATE);
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
    }
}
