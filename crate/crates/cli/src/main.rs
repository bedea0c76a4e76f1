//! `gaborscope`: ingest, split, train, score, evaluate and interpret.

mod commands;
mod manifest;
mod predictions;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gaborscope::dataset::SplitStrategy;
use gaborscope::synth::{EEG_CHANNEL, EOG_CHANNEL};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] gaborscope::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    fn exit_code(&self) -> u8 {
        use gaborscope::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::Divergence { .. }) => 4,
            _ => 3,
        }
    }

    fn kind(&self) -> &'static str {
        use gaborscope::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Csv(_) => "csv",
            CliError::Core(e) => match e {
                E::Config(_) => "config",
                E::Divergence { .. } => "divergence",
                E::Edf { .. } => "edf",
                E::Hypnogram(_) => "hypnogram",
                E::MissingChannel(_) => "missing-channel",
                E::RateMismatch(_) => "rate-mismatch",
                E::Segmentation(_) => "segmentation",
                E::Split(_) => "split",
                E::Checkpoint(_) => "checkpoint",
                E::Metric(_) => "metric",
                E::NonFinite(_) => "non-finite",
                E::Shape(_) => "shape",
                E::Data(_) => "data",
                E::Io(_) => "io",
                E::Json(_) => "json",
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "gaborscope",
    version,
    about = "Interpretable sleep-stage scoring with trainable Gabor kernels"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic EDF+ cohort with Markov stage sequences.
    Synth(SynthArgs),
    /// Read EDF recordings and hypnograms into an epoch store.
    Ingest(IngestArgs),
    /// Split a store into train/validation/test recordings.
    Split(SplitArgs),
    /// Write a freshly initialized single-epoch checkpoint.
    Init(InitArgs),
    /// Train the single-epoch network.
    TrainSingle(TrainSingleArgs),
    /// Train the multi-epoch network on a trained single-epoch checkpoint.
    TrainMulti(TrainMultiArgs),
    /// Predict stages for stored epochs.
    Score(ScoreArgs),
    /// Compare predictions with the truth.
    Eval(EvalArgs),
    /// Kernel impact report for a trained checkpoint.
    Interpret(InterpretArgs),
    /// Gabor kernel waveforms and spectra of a checkpoint.
    ExportKernels(ExportArgs),
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub subjects: usize,
    #[arg(long, default_value_t = 2)]
    pub nights: usize,
    /// Epochs per recording.
    #[arg(long, default_value_t = 120)]
    pub epochs: usize,
    /// Probability that an epoch keeps the previous stage.
    #[arg(long, default_value_t = 0.9)]
    pub persistence: f64,
    /// Fraction of epochs whose signal is drawn from another stage.
    #[arg(long, default_value_t = 0.1)]
    pub corruption: f64,
}

#[derive(Args, Serialize)]
pub struct IngestArgs {
    /// Directory of EDF files (hypnograms as EDF+ annotations, separate
    /// `*Hypnogram*.edf` files, or `<recording>.csv`).
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = EEG_CHANNEL)]
    pub eeg_channel: String,
    #[arg(long, default_value = EOG_CHANNEL)]
    pub eog_channel: String,
}

#[derive(Args, Serialize)]
pub struct SplitArgs {
    /// Epoch store.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// night[:k], subject[:k], record or loo.
    #[arg(long, default_value = "night")]
    pub strategy: SplitStrategy,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArg {
    Gabor,
    PlainConv,
}

#[derive(Args, Serialize)]
pub struct InitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct TrainSingleArgs {
    /// Training configuration (JSON or key = value lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Epoch store.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Split manifest written by `split`.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
}

#[derive(Args, Serialize)]
pub struct TrainMultiArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Single-epoch checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetArg {
    Train,
    Validation,
    Test,
}

/// Which stored epochs a command works on.
#[derive(Args, Serialize)]
pub struct Selection {
    /// Epoch store.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Split manifest; with `--set`, selects that part of it.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub set: SetArg,
    /// Recording ids to use instead of a split (repeatable).
    #[arg(long = "recording")]
    pub recordings: Vec<String>,
}

#[derive(Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    /// Prediction files (`recording,epoch,stage[,single]`); one per fold.
    #[arg(long, required = true)]
    pub predictions: Vec<PathBuf>,
    /// Truth files (`recording,epoch,stage`), paired with `--predictions`.
    #[arg(long, required = true)]
    pub truth: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Logit,
    Probability,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetArg {
    True,
    Predicted,
}

#[derive(Args, Serialize)]
pub struct InterpretArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `RECORDING:EPOCH` whose Eff(t) traces are written (repeatable).
    #[arg(long = "trace")]
    pub traces: Vec<String>,
    #[arg(long, value_enum, default_value = "logit")]
    pub objective: ObjectiveArg,
    /// Class each epoch is explained against.
    #[arg(long, value_enum, default_value = "true")]
    pub target: TargetArg,
    /// Epochs per gradient pass.
    #[arg(long, default_value_t = 16)]
    pub chunk: usize,
}

#[derive(Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => commands::synth(a, seed),
        Command::Ingest(a) => commands::ingest(a, seed),
        Command::Split(a) => commands::split(a, seed),
        Command::Init(a) => commands::init(a, seed),
        Command::TrainSingle(a) => commands::train_single(a, seed),
        Command::TrainMulti(a) => commands::train_multi(a, seed),
        Command::Score(a) => commands::score(a, seed),
        Command::Eval(a) => commands::eval(a, seed),
        Command::Interpret(a) => commands::interpret(a, seed),
        Command::ExportKernels(a) => commands::export_kernels(a, seed),
    }
}

fn report(kind: &str, code: u8, message: &str) {
    let line = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    gaborscope::alloc::retain_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GABORSCOPE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            // Human-readable usage first, then the machine-readable line.
            eprint!("{}", e.render());
            report("usage", 2, e.kind().as_str().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            report(e.kind(), code, &e.to_string());
            ExitCode::from(code)
        }
    }
}
