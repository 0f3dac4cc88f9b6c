//! `renetd`: train, detect, evaluate, sweep, synthesize and benchmark.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use renetd_core::Error;

use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "renetd", version, about = "Reconstruction-residual texture defect detection")]
struct Cli {
    /// Plain-text `key = value` file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a folder of defect-free images.
    Train(commands::TrainArgs),
    /// Run detection on an image or a folder of images.
    Detect(commands::DetectArgs),
    /// Score detections against ground-truth masks.
    Eval(commands::EvalArgs),
    /// Train and evaluate once per value of a loss or alpha axis.
    Sweep(commands::SweepArgs),
    /// Write synthetic textures with planted defects.
    Synth(commands::SynthArgs),
    /// Median per-stage detection timings.
    Bench(commands::BenchArgs),
}

/// 2 for configuration, input or checkpoint-format problems; 3 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Dataset(_)
            | Error::Image { .. }
            | Error::BadMagic
            | Error::UnsupportedVersion(_)
            | Error::Truncated
            | Error::FingerprintMismatch { .. }
            | Error::Checkpoint(_),
        ) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = cli.config.as_deref();
    let result = match cli.command {
        Command::Train(a) => commands::train(a, cfg),
        Command::Detect(a) => commands::detect(a, cfg),
        Command::Eval(a) => commands::eval(a, cfg),
        Command::Sweep(a) => commands::sweep(a, cfg),
        Command::Synth(a) => commands::synth(a, cfg),
        Command::Bench(a) => commands::bench(a, cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
