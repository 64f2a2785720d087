//! `slg`: command-line driver for the intensification-aware sign generation
//! pipeline. Exit status is 0 on success, 1 on a failed run and 2 on a usage
//! error.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use slg_core::intensify::Strategy;

use commands::{EvaluateArgs, GenerateArgs};
use config::Layers;

#[derive(Parser, Debug)]
#[command(name = "slg", version, about = "Intensification-aware gloss-to-pose generation")]
struct Cli {
    /// Log progress (-v) or debug detail (-vv) to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with ground-truth intensity labels.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        layers: Layers,
    },
    /// Rewrite the glosses of a labeled corpus under one enhancement strategy.
    Enhance {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the intensity tagger on the labeled train split.
    TagTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        layers: Layers,
    },
    /// Label every gloss of a corpus with a trained tagger.
    TagLabel {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// TSV of human labels that take precedence over predictions.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a counter-decoded pose transformer.
    PtTrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Enhance glosses on the fly; omit for plain glosses.
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        layers: Layers,
    },
    /// Train the multi-source dynamic selection model.
    DynTrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated strategies, one per source.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        layers: Layers,
    },
    /// Generate pose sequences (and α traces) from a trained generator.
    Generate(GenerateArgs),
    /// Train the pose-to-text back-translator.
    BtTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        layers: Layers,
    },
    /// Score hypotheses with BLEU-1..4, ROUGE-L and bootstrap significance.
    Evaluate(EvaluateArgs),
    /// Render a pose CSV or α-trace CSV as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionArg {
    All,
    With,
    Without,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
