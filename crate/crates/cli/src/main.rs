//! `snn-kws`: train, evaluate and inspect spiking keyword-spotting models.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use snn_kws::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "snn-kws", version, about = "Spiking keyword spotting on raw waveforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train(CommonArgs),
    /// Report loss, accuracy and the confusion matrix of a checkpoint.
    Eval(CommonArgs),
    /// Per-layer firing rates and the AC/MAC energy estimate.
    Energy(EnergyArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Print the resolved configuration and parameter table.
    Inspect(CommonArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root of a speech-commands directory tree.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Label protocol: v1-12, v2-12 or v2-35.
    #[arg(long)]
    pub mode: Option<String>,
    /// snn-kws, glsc-only-local, glsc-only-global or glc-ann.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Checkpoint to load (eval, energy, inspect) or to start from (train).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (train) or report file (eval, energy, inspect).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the generated two-tone task instead of a dataset tree.
    #[arg(long)]
    pub synthetic: bool,
    /// Split to evaluate: train, validation or test.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct EnergyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of samples to run through the network.
    #[arg(long, default_value_t = 100)]
    n_samples: usize,
    /// Report for a given network firing rate instead of running a model.
    #[arg(long)]
    rate: Option<f64>,
    /// Cost of an accumulate relative to a multiply-accumulate.
    #[arg(long)]
    ac_mac: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corrupts the backward rule of the named operation.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(error: Error) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: error.to_string(),
        }
    }

    pub fn data(error: Error) -> Self {
        Self {
            code: EXIT_DATA,
            message: error.to_string(),
        }
    }

    pub fn verification(message: String) -> Self {
        Self { code: EXIT_VERIFY, message }
    }
}

/// Classifies errors raised while running a command.
impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Data(_) | Error::UnsupportedFormat { .. } | Error::Parse { .. } | Error::Io { .. } => EXIT_DATA,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: error.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Energy(a) => commands::energy(&a.common, a.n_samples, a.rate, a.ac_mac),
        Command::Gradcheck(a) => commands::gradcheck(a.seed, a.inject_fault.as_deref(), a.out.as_deref()),
        Command::Inspect(args) => commands::inspect(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
