//! Command-line front end. [`run_cli`] parses arguments, runs one
//! subcommand and maps failures to exit codes: 0 success, 1 usage error,
//! 2 data error (bad input files or configs), 3 runtime failure.

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::io;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use stitchguard::audio::AudioError;
use stitchguard::augment::AugmentError;
use stitchguard::config::ConfigError;
use stitchguard::features::FeatureError;
use stitchguard::metrics::MetricsError;
use stitchguard::model::ModelError;
use stitchguard::nn::NnError;
use stitchguard::pipeline::PipelineError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "stitchguard", version, about = "Deepfake audio detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract features for every utterance in a manifest.
    Extract(ExtractArgs),
    /// Plan and apply data augmentation.
    Augment(AugmentArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Fine-tune a trained model (70% overlap, learning rate / 100).
    Finetune(FinetuneArgs),
    /// Score utterances with a trained model.
    Infer(InferArgs),
    /// Equal error rate of a score file.
    Eer(EerArgs),
    /// Weighted challenge score from two round EERs.
    FinalScore(FinalScoreArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "lfcc")]
    pub feature: String,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub nfft: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Plan file; created from the other flags when it does not exist.
    #[arg(long)]
    pub plan: PathBuf,
    /// Recordings shared by the noise, music and babble distortions.
    #[arg(long)]
    pub noise_manifest: Option<PathBuf>,
    #[arg(long)]
    pub rir_manifest: Option<PathBuf>,
    /// Codec round-trip command with {in}, {out}, {bitrate} and {codec}
    /// placeholders; it must write a WAV file at {out}.
    #[arg(long)]
    pub codec_cmd: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Candidates drawn per clean utterance.
    #[arg(long, default_value_t = 5)]
    pub expansion: usize,
    #[arg(long)]
    pub distortion_budget: Option<usize>,
    #[arg(long)]
    pub compression_budget: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of extracted `.feat` files; features are computed from
    /// audio when omitted.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the per-epoch log to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "normal")]
    pub mode: String,
    #[arg(long)]
    pub chunk_ms: Option<u32>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EerArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Manifest supplying labels for score files without a label column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinalScoreArgs {
    #[arg(long)]
    pub r1: f64,
    #[arg(long)]
    pub r2: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn io_error(e: &io::Error) -> CliError {
    match e.kind() {
        io::ErrorKind::NotFound | io::ErrorKind::UnexpectedEof | io::ErrorKind::InvalidData => {
            CliError::Data(e.to_string())
        }
        _ => CliError::Runtime(e.to_string()),
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        io_error(&e)
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        match &e {
            AudioError::Io(io) => io_error(io),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Io(io) => io_error(&io),
            FeatureError::Audio(a) => a.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(io) => io_error(&io),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::InvalidConfig(_) => Self::Data(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(n) => n.into(),
            ModelError::Io(io) => match io.kind() {
                io::ErrorKind::UnexpectedEof => Self::Data(format!("truncated checkpoint: {io}")),
                _ => io_error(&io),
            },
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::Audio(a) => a.into(),
            AugmentError::Io(io) => io_error(&io),
            e @ (AugmentError::EncoderNotFound(_) | AugmentError::EncoderFailed { .. }) => {
                Self::Runtime(e.to_string())
            }
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Feature(x) => x.into(),
            PipelineError::Audio(x) => x.into(),
            PipelineError::Model(x) => x.into(),
            PipelineError::Nn(x) => x.into(),
            PipelineError::Metrics(x) => x.into(),
            PipelineError::Augment(x) => x.into(),
            PipelineError::Config(x) => x.into(),
            PipelineError::Io(x) => x.into(),
            e @ PipelineError::Diverged { .. } => Self::Runtime(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<rayon::ThreadPoolBuildError> for CliError {
    fn from(e: rayon::ThreadPoolBuildError) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn with_threads<F>(threads: Option<usize>, f: F) -> CliResult<()>
where
    F: FnOnce() -> CliResult<()> + Send,
{
    match threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f),
        None => f(),
    }
}

/// Runs the command line `argv` (program name first) and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("stitchguard: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Extract(a) => with_threads(a.common.threads, || commands::extract(&a)),
        Command::Augment(a) => with_threads(a.common.threads, || commands::augment(&a)),
        Command::Train(a) => with_threads(a.common.threads, || commands::train(&a)),
        Command::Finetune(a) => with_threads(a.common.threads, || commands::finetune(&a)),
        Command::Infer(a) => with_threads(a.common.threads, || commands::infer(&a)),
        Command::Eer(a) => commands::eer(&a),
        Command::FinalScore(a) => commands::final_score(&a),
    }
}
