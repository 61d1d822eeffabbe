//! `qgkit` command-line pipeline: preprocess, describe, generate, evaluate,
//! chat-baseline and export-train.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod io;
mod mock;

use commands::Outcome;
use config::{Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "qgkit", version, about = "Multimodal question generation pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML, or JSON when the extension is .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the split seed and replaces the run seeds with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-example work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use in-process mock services instead of endpoints.
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    image_root: Option<PathBuf>,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    signals: PathBuf,
    #[arg(long)]
    split: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a JSONL corpus to complete examples and split it.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory receiving examples.jsonl and split.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption and OCR every example image.
    Describe {
        #[arg(long)]
        examples: PathBuf,
        /// Signals JSONL file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate test-split questions, one predictions file per run seed.
    Generate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction files against references and average across runs.
    Evaluate {
        /// Examples file or raw corpus supplying the reference questions.
        #[arg(long)]
        references: PathBuf,
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// Report JSON file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot chat-model baseline with retrieved exemplars.
    ChatBaseline {
        #[command(flatten)]
        inputs: Inputs,
        /// Number of exemplars per prompt (0 to 7).
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write fine-tuning files, hyperparameters and a manifest.
    ExportTrain {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    let g = cli.global;
    let shots = match &cli.command {
        Command::ChatBaseline { shots, .. } => *shots,
        _ => None,
    };
    let overrides = Overrides {
        seed: g.seed,
        mock: g.mock,
        shots,
        image_root: g.image_root,
    };
    let config = PipelineConfig::load(g.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Preprocess { corpus, out } => commands::preprocess(&corpus, &out, &config),
        Command::Describe { examples, out } => commands::describe(&examples, &out, &config, g.jobs),
        Command::Generate { inputs, out } => commands::generate(
            &inputs.examples,
            &inputs.signals,
            &inputs.split,
            &out,
            &config,
            g.jobs,
        ),
        Command::Evaluate {
            references,
            predictions,
            out,
        } => commands::evaluate_cmd(&predictions, &references, &out, &config),
        Command::ChatBaseline { inputs, out, .. } => commands::chat_baseline(
            &inputs.examples,
            &inputs.signals,
            &inputs.split,
            &out,
            &config,
            g.jobs,
        ),
        Command::ExportTrain { inputs, out } => {
            commands::export_train(&inputs.examples, &inputs.signals, &inputs.split, &out, &config)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => {
            eprintln!("warning: some examples failed; see the error fields in the output");
            ExitCode::from(2)
        }
        Ok(Outcome::AllFailed) => {
            eprintln!("error: every example failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
