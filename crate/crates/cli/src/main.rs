//! `acal`: command-line driver for data generation, pretraining, training,
//! ablations, gradient checks and reports.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file; omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set trainer.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Output directory (same as `--set output.dir=...`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the glyph corpora of one seed as IDX files.
    GenData {
        /// Also write PGM images plus a labels.csv manifest per split.
        #[arg(long)]
        export: bool,
    },
    /// Pretrain the source task model and save its checkpoint.
    Pretrain,
    /// Train one variant.
    Train {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this source checkpoint instead of pretraining.
        #[arg(long, value_name = "PATH")]
        source_model: Option<PathBuf>,
    },
    /// Run every (variant, seed) pair of the ablation section.
    Ablate,
    /// Finite-difference check of every op and network topology.
    Gradcheck {
        /// Coordinates checked per network parameter tensor.
        #[arg(long, default_value_t = 64)]
        coords: usize,
        /// Write the full report as JSON.
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Render a saved ablation report (report.json) as csv, json or svg.
    Report {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Destination file; standard output when omitted.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Write source/mapped/cycled PGM triplets from a trained state.
    DumpSamples {
        /// State directory written by `train` (default: <out>/state).
        #[arg(long, value_name = "DIR")]
        state: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Print the effective config in canonical form.
    PrintConfig,
}

#[derive(Parser, Debug)]
#[command(name = "acal", version, about = "Augmented cyclic adversarial learning lab")]
struct Root {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let root = match Root::try_parse() {
        Ok(r) => r,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let source = root
        .config
        .config
        .as_ref()
        .map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    match commands::run(root.command, &root.config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("config: {source}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
