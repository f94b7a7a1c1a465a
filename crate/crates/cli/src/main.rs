//! `stam`: generate synthetic tactile datasets, train and ablate the
//! attention model, and export saliency maps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 missing
//! prerequisite, 5 ablation grid below 90% completion.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "stam", version, about = "Spatio-temporal attention for tactile texture sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `data_dir` for gen-data, `out_dir` otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset described by the config.
    GenData(Common),
    /// Train one model and report its test accuracy.
    Train(Common),
    /// Run the variant x length x window x seed grid (`STAM_THREADS` caps parallel cells).
    Ablate(Common),
    /// Export Grad-CAM maps and temporal attention for one sequence.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to explain; defaults to `<out_dir>/checkpoint.stam`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence id; defaults to the first test sequence.
        #[arg(long)]
        sample: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c.into()),
        Command::Train(c) => commands::train(&c.into()),
        Command::Ablate(c) => commands::ablate(&c.into()),
        Command::Explain { common, checkpoint, sample } => commands::explain(&common.into(), checkpoint, sample),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl From<Common> for commands::Options {
    fn from(c: Common) -> Self {
        commands::Options { config: c.config, out: c.out, seed: c.seed }
    }
}
