//! `emotag`: batch pipeline for multi-label emotion tagging.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emotag_core::{Error, Split};

use crate::commands::Ctx;
use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "emotag", version, about = "Multi-label emotion tagging pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize, tokenize and encode the corpus splits.
    Preprocess,
    /// Add gated weak labels and oversample the training split.
    Balance {
        #[arg(long)]
        target: Option<usize>,
    },
    /// Train and checkpoint the model.
    Train {
        /// Temporal average pooling instead of attention.
        #[arg(long)]
        no_attention: bool,
        #[arg(long)]
        mixed_precision: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Train on the output of `balance`.
        #[arg(long)]
        balanced: bool,
    },
    /// Per-label threshold search on the validation split.
    TuneThresholds,
    /// Aggregate and per-label metrics for a split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        /// One threshold for every label instead of the tuned ones.
        #[arg(long)]
        threshold: Option<f64>,
        /// Score an existing predictions CSV instead of running the model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write a per-label F1 bar chart.
        #[arg(long)]
        svg: bool,
    },
    /// Probabilities and ranked labels for a split or a file of text lines.
    Predict {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Consolidated summary of the run's artifacts.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut overrides = Overrides {
        seed: cli.common.seed,
        output_dir: cli.common.output_dir.clone(),
        ..Default::default()
    };
    match &cli.command {
        Command::Train {
            no_attention,
            mixed_precision,
            epochs,
            batch_size,
            ..
        } => {
            overrides.no_attention = *no_attention;
            overrides.mixed_precision = *mixed_precision;
            overrides.epochs = *epochs;
            overrides.batch_size = *batch_size;
        }
        Command::Balance { target } => overrides.target = *target,
        _ => {}
    }
    let path = cli
        .common
        .config
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let ctx = Ctx::new(RunConfig::load(&path, &overrides)?)?;
    match cli.command {
        Command::Preprocess => commands::preprocess(&ctx),
        Command::Balance { .. } => commands::balance(&ctx),
        Command::Train { balanced, .. } => commands::train_model(&ctx, balanced),
        Command::TuneThresholds => commands::tune(&ctx),
        Command::Evaluate {
            split,
            threshold,
            predictions,
            svg,
        } => commands::evaluate_split(&ctx, split, threshold, predictions.as_deref(), svg),
        Command::Predict { split, input, threshold } => commands::predict(&ctx, split, input.as_deref(), threshold),
        Command::Report => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(exit_code(&Error::Shape("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("mixed precision diverged".into())), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
