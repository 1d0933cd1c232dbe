//! `capdet`: data generation, training, evaluation and open-world inference.

mod common;
mod eval;
mod gen_data;
mod infer;
mod manifest;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::common::CliError;

#[derive(Debug, Parser)]
#[command(name = "capdet", version, about = "Open-vocabulary detection with dense captioning on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic detection and dense-caption corpus.
    GenData(gen_data::GenDataArgs),
    /// Train a model and write checkpoints plus per-step metrics.
    Train(train::TrainArgs),
    /// Zero-shot detection AP of a checkpoint (or a predictions file).
    EvalDet(eval::EvalDetArgs),
    /// Dense-captioning mAP of a checkpoint (or a predictions file).
    EvalCap(eval::EvalCapArgs),
    /// Two-stage inference on one image: known categories plus captioned unknowns.
    Infer(infer::InferArgs),
}

fn run(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data::run(a, argv),
        Command::Train(a) => train::run(a, argv),
        Command::EvalDet(a) => eval::run_det(a, argv),
        Command::EvalCap(a) => eval::run_cap(a, argv),
        Command::Infer(a) => infer::run(a, argv),
    }
}

fn report_error(e: &CliError) {
    let body = serde_json::json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
        }
    });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error(&CliError::Usage(e.to_string().trim_end().to_string()));
            return ExitCode::FAILURE;
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
