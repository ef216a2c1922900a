mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::settings::{ModelFlags, TrainFlags};

/// Train, evaluate and inspect EENED seizure-detection models.
///
/// Exit codes: 0 success, 1 configuration error, 2 data error,
/// 3 runtime error, 4 gradient check failure.
#[derive(Parser)]
#[command(name = "eened", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, log and metrics report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Classify a single segment.
    Predict(PredictArgs),
    /// Convert a CSV file into a binary dataset cache with split tags.
    Ingest(IngestArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitMode {
    /// Published counts when the file is large enough, else proportional.
    Auto,
    Published,
    Proportional,
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// CSV file or dataset cache.
    #[arg(long, conflicts_with = "toy")]
    data: Option<PathBuf>,
    /// Use the built-in synthetic dataset instead of a file.
    #[arg(long)]
    toy: bool,
    /// CSV has no header row.
    #[arg(long)]
    no_header: bool,
    /// CSV has no leading id column.
    #[arg(long)]
    no_id_column: bool,
    #[arg(long, value_enum, default_value_t = SplitMode::Auto)]
    split: SplitMode,
    /// Share of each class held out for testing in proportional mode.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Seed for the split, the synthetic data and (for train) the model.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size architecture.
    Full,
    /// Reduced width and depth for CPU training.
    Desk,
    /// Tiny model for smoke tests.
    Toy,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Log file (default: checkpoint path with `.log`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Metrics report file (default: checkpoint path with `.metrics`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting configuration (default: toy with --toy, full otherwise).
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    on: EvalSplit,
    /// Also write the metrics report to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Test,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Check a single module (primitives, pwff, mhsa, conv, block, model).
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = eened::gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = eened::gradcheck::DEFAULT_STEP)]
    step: f64,
    /// Coordinates sampled per tensor (0 checks all of them).
    #[arg(long, default_value_t = 64)]
    max_coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negate the backward pass of one op, to exercise the failure path.
    #[arg(long)]
    inject_fault: Option<String>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated raw feature values.
    #[arg(long, conflicts_with = "csv", allow_hyphen_values = true)]
    features: Option<String>,
    /// CSV file holding the segment; see --row.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Zero-based data row of --csv.
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// The CSV row is bare features (no id column, no label column).
    #[arg(long)]
    bare: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
pub struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Predict(a) => commands::predict(a),
        Command::Ingest(a) => commands::ingest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
