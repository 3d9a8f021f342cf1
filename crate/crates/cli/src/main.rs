//! `neurodecode`: synthesize sessions, train and evaluate decoders, run the
//! matching task and the input-length sweep, and serve a model over TCP.
//!
//! Exit codes: 0 success, 1 runtime fault, 2 usage or configuration error.

mod commands;
mod record;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurodecode::chronometry::ChronoError;
use neurodecode::dataset::DatasetError;
use neurodecode::engine::EngineError;
use neurodecode::experiment::ExperimentError;
use neurodecode::model::ModelError;
use neurodecode::synthgen::SynthError;
use neurodecode::{Exec, GestureLabel};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Gesture(_) | SynthError::Config(_) => CliError::Usage(e.to_string()),
            SynthError::Signal(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Synth(s) => s.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => CliError::Usage(e.to_string()),
            ExperimentError::Dataset(d) => d.into(),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Synth(s) => s.into(),
            ExperimentError::Engine(g) => g.into(),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Bind { .. } => CliError::Usage(e.to_string()),
            EngineError::Model(m) => m.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ChronoError> for CliError {
    fn from(e: ChronoError) -> Self {
        match e {
            ChronoError::Config(_) => CliError::Usage(e.to_string()),
            ChronoError::Engine(g) => g.into(),
            ChronoError::Synth(s) => s.into(),
            ChronoError::Experiment(x) => x.into(),
            ChronoError::Metrics(_) => CliError::Runtime(e.to_string()),
        }
    }
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text)
}

#[derive(Parser, Debug)]
#[command(name = "neurodecode", version, about = "Nerve-signal gesture decoding experiments")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Where to write the run manifest (defaults next to the outputs).
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic recording session.
    Synth(SynthArgs),
    /// Train a decoder; the last session validates.
    Train(TrainArgs),
    /// Score a checkpoint on a session.
    Eval(EvalArgs),
    /// Run the simulated gesture matching task.
    Match(MatchArgs),
    /// Accuracy and latency against decoder history length.
    SweepInputLength(SweepArgs),
    /// Serve a checkpoint over TCP until interrupted.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DriftArgs {
    /// Fraction of gain moving to the neighbouring channel per day.
    #[arg(long, default_value_t = 0.0)]
    pub gain_drift: f64,
    /// Noise floor change per day.
    #[arg(long, default_value_t = 0.0)]
    pub baseline_shift: f64,
    /// Burst rate change per day, in Hz.
    #[arg(long, default_value_t = 0.0)]
    pub rate_drift: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// benchmark16, ulnar8 or a JSON profile file.
    #[arg(long, default_value = "benchmark16")]
    pub profile: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "session")]
    pub session_id: String,
    /// Days since the reference session; scales the drift flags.
    #[arg(long, default_value_t = 0)]
    pub day: u32,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub hold_s: Option<f64>,
    #[arg(long)]
    pub rest_s: Option<f64>,
    /// Comma-separated six-character gesture strings.
    #[arg(long, value_delimiter = ',')]
    pub gestures: Option<Vec<String>>,
    /// Session spec as TOML; flags override its fields.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    #[command(flatten)]
    pub drift: DriftArgs,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelChoice {
    /// benchmark (compact network, faster schedule) or full (default network size).
    #[arg(long, default_value = "benchmark")]
    pub preset: String,
    /// TOML with optional [model], [train] and [window] tables layered over the preset.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR", num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelChoice,
    /// With a single session, hold out its tail for validation; the value
    /// is the training fraction.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.8")]
    pub split: Option<f64>,
    /// Train on every n-th frame.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, value_name = "DIR", default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MatchArgs {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    /// benchmark16, ulnar8 or a JSON profile file.
    #[arg(long, default_value = "benchmark16")]
    pub profile: String,
    /// Task settings as TOML; flags override its fields.
    #[arg(long, value_name = "FILE")]
    pub task: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub cutoff_s: Option<f64>,
    #[arg(long)]
    pub rate_hz: Option<f64>,
    /// Chance that the first attempt is a wrong gesture.
    #[arg(long)]
    pub error_rate: Option<f64>,
    #[arg(long, value_name = "DIR", default_value = "runs/match")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_name = "DIR", num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "0.8")]
    pub split: Option<f64>,
    /// History lengths in seconds.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,1.0,2.0")]
    pub lengths: Vec<f64>,
    /// Feature columns per decoder input, fixed across lengths.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[command(flatten)]
    pub model: ModelChoice,
    #[arg(long, default_value_t = 10.0)]
    pub rate_hz: f64,
    /// Seconds of the validation session streamed for latency.
    #[arg(long, default_value_t = 10.0)]
    pub latency_s: f64,
    #[arg(long, value_name = "DIR", default_value = "runs/sweep")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ServeArgs {
    /// Checkpoint; may instead come from the engine config.
    #[arg(long, value_name = "CKPT")]
    pub model: Option<PathBuf>,
    /// Engine config TOML.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub rate_hz: Option<f64>,
    /// Stop after this many sessions.
    #[arg(long)]
    pub max_sessions: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = "runs/serve")]
    pub out: PathBuf,
}

pub fn parse_gesture(s: &str) -> Result<GestureLabel, CliError> {
    s.parse()
        .map_err(|e: neurodecode::label::GestureParseError| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let ctx = commands::Context {
        exec,
        manifest: cli.manifest,
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Match(a) => commands::matching(&ctx, a),
        Command::SweepInputLength(a) => commands::sweep(&ctx, a),
        Command::Serve(a) => commands::serve(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
