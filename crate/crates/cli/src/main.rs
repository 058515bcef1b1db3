//! `adrec`: data generation, graph building, training, evaluation,
//! inference and hyperparameter search from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "adrec",
    version,
    about = "Heterogeneous temporal GNN ad recommendation"
)]
struct Cli {
    /// Log level for stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Grid,
    Bayes,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Validation,
    Train,
    All,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-platform event log.
    GenData {
        /// JSON synthetic spec; defaults to the three reference platforms.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Users per platform when no spec is given.
        #[arg(long, default_value_t = 700)]
        users: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Build the heterogeneous graph of an event log.
    BuildGraph {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its snapshot, loss trace and metrics.
    Train {
        #[arg(long)]
        events: PathBuf,
        /// JSON training config; defaults to the desk configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Overrides the epoch count of the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained model, or score a predictions file.
    Eval {
        /// Model directory written by `train`.
        #[arg(long, required_unless_present = "predictions")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "predictions")]
        events: Option<PathBuf>,
        /// CSV with columns `platform,label,prob` to score directly.
        #[arg(long, conflicts_with_all = ["model", "events"])]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "validation")]
        split: Split,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// JSON report path; a CSV table is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Rank ads for a list of users with sampled mini-batch inference.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Graph directory; defaults to the one saved with the model.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// File with one unified user id per line.
        #[arg(long)]
        users: PathBuf,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, default_value_t = adrec_core::inference::DEFAULT_RATE)]
        rate: f64,
        #[arg(long, default_value_t = adrec_core::inference::DEFAULT_KHOP)]
        khop: usize,
        /// Memory budget per sub-batch in bytes.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value_t = adrec_core::inference::DEFAULT_CACHE_CAPACITY)]
        cache_capacity: usize,
        #[arg(long, default_value_t = adrec_core::inference::DEFAULT_CACHE_WINDOW_SECS)]
        cache_window: i64,
        /// Current time for the cache window; defaults to the latest edge.
        #[arg(long)]
        now: Option<i64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSONL path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search hyperparameters and write a trial ledger and the best config.
    Hpo {
        #[arg(long)]
        events: PathBuf,
        /// `table1` or a JSON search space.
        #[arg(long, default_value = "table1")]
        space: String,
        #[arg(long, value_enum, default_value = "combined")]
        mode: Mode,
        /// Maximum number of trials; the grid mode defaults to all points.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: u64,
        /// Base training config the search points override.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = adrec_core::hpo::DEFAULT_HPO_EPOCHS)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
