//! `mambacaps`: train, evaluate and explain ECG beat classifiers.
//!
//! Exit status is 0 on success, 2 for usage, configuration and input
//! errors, and 3 when training or inference hits a numeric failure.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use settings::{Dataset, Preset};

/// An error in how the program was invoked or configured.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "mambacaps",
    version,
    about = "Train, evaluate and explain MambaCapsule ECG beat classifiers"
)]
struct Cli {
    /// Configuration file with [model], [train] and [data] sections
    #[arg(long, global = true, env = "MAMBACAPS_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint, log and resolved configuration
    Train(TrainArgs),
    /// Score a checkpoint on labelled beats
    Eval(EvalArgs),
    /// Reconstruction studies for one beat
    Explain(ExplainArgs),
    /// Write synthetic two-class beats as CSV
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Train on generated beats (same as --dataset synthetic)
    #[arg(long, conflicts_with = "dataset")]
    synthetic: bool,
    /// Class vocabulary of the data [default: synthetic]
    #[arg(long, value_enum, env = "MAMBACAPS_DATASET")]
    dataset: Option<Dataset>,
    /// Training beats as CSV: L samples then the label per row
    #[arg(long, env = "MAMBACAPS_TRAIN_CSV")]
    train_csv: Option<PathBuf>,
    /// Test beats as CSV; without it the training file is split
    #[arg(long, env = "MAMBACAPS_TEST_CSV")]
    test_csv: Option<PathBuf>,
    /// Train share of a stratified split [default: 0.8]
    #[arg(long, env = "MAMBACAPS_SPLIT_RATIO")]
    split_ratio: Option<f64>,
    /// Generated beats per class for training; half as many for testing [default: 100]
    #[arg(long, env = "MAMBACAPS_SYNTHETIC_PER_CLASS")]
    synthetic_per_class: Option<usize>,
    /// Seed for data generation and splitting [default: 0]
    #[arg(long, env = "MAMBACAPS_DATA_SEED")]
    data_seed: Option<u64>,
    /// Model size [default: tiny for synthetic data, full otherwise]
    #[arg(long, value_enum, env = "MAMBACAPS_PRESET")]
    preset: Option<Preset>,
    /// Training epochs [default: 30]
    #[arg(long, env = "MAMBACAPS_EPOCHS")]
    epochs: Option<usize>,
    /// Beats per optimiser step [default: 128, or 16 with the tiny preset]
    #[arg(long, env = "MAMBACAPS_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Peak learning rate [default: 0.003]
    #[arg(long, env = "MAMBACAPS_LR")]
    lr: Option<f64>,
    /// Seed for initialisation, shuffling and dropout [default: 0]
    #[arg(long, env = "MAMBACAPS_SEED")]
    seed: Option<u64>,
    /// Data-parallel shards per batch [default: 1]
    #[arg(long, env = "MAMBACAPS_WORKERS")]
    workers: Option<usize>,
    /// Directory for model.ckpt, train.log, config.ini and confusion.csv
    #[arg(long, env = "MAMBACAPS_OUT_DIR", default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Where evaluation and explanation beats come from.
#[derive(Args, Debug)]
pub struct SourceArgs {
    /// Use generated beats instead of a CSV file
    #[arg(long, conflicts_with_all = ["csv", "dataset"])]
    synthetic: bool,
    /// Labelled beats as CSV
    #[arg(long, env = "MAMBACAPS_CSV")]
    csv: Option<PathBuf>,
    /// Class vocabulary the data is labelled with; must match the checkpoint
    #[arg(long, value_enum, env = "MAMBACAPS_DATASET")]
    dataset: Option<Dataset>,
    /// Which generated split to use
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Generated beats per class in the training split [default: 100]
    #[arg(long, env = "MAMBACAPS_SYNTHETIC_PER_CLASS")]
    synthetic_per_class: Option<usize>,
    /// Seed the generated beats were drawn with [default: 0]
    #[arg(long, env = "MAMBACAPS_DATA_SEED")]
    data_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint
    #[arg(long, env = "MAMBACAPS_CHECKPOINT")]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    /// Where to write the confusion matrix
    #[arg(long, default_value = "confusion.csv")]
    confusion_out: PathBuf,
    /// Also write the per-class report as CSV
    #[arg(long)]
    report_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExplainMode {
    /// Reconstruct time-shifted copies of the beat
    Shift,
    /// Reconstruct the beat as another class
    Crosslabel,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Model checkpoint
    #[arg(long, env = "MAMBACAPS_CHECKPOINT")]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: SourceArgs,
    /// Row of the data to explain
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, value_enum)]
    mode: ExplainMode,
    /// Shifts in samples, as a..b (inclusive) or a comma list
    #[arg(long, default_value = "-5..5", allow_hyphen_values = true)]
    shifts: String,
    /// Class to reconstruct as; every class when omitted
    #[arg(long)]
    target: Option<String>,
    /// SVG output; a CSV of the traces is written alongside
    #[arg(long, default_value = "explain.svg")]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Beats per class
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Samples per beat
    #[arg(long, default_value_t = 187)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mambacaps_core::Error>() {
            return match e {
                mambacaps_core::Error::Numeric(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Train(a) => commands::train(config, a),
        Command::Eval(a) => commands::eval(config, a),
        Command::Explain(a) => commands::explain(config, a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
