//! The `slotmil` command line: dataset synthesis, training, evaluation and
//! attention export.

mod attn;
mod eval;
mod manifest;
mod synth;
mod train;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use attn::AttnArgs;
pub use eval::EvalArgs;
pub use manifest::RunManifest;
pub use synth::SynthArgs;
pub use train::TrainArgs;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable capping how many folds train at once.
pub const THREADS_ENV: &str = "SLOTMIL_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// A flag value is out of range or inconsistent with another flag.
    Usage(String),
    Io { path: PathBuf, source: std::io::Error },
    Core(slotmil::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use slotmil::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) if e.is_io() => EXIT_IO,
            CliError::Core(E::Format(_) | E::Truncated { .. } | E::Validation(_) | E::Csv(_)) => EXIT_IO,
            CliError::Core(E::Numeric(_) | E::UndefinedMetric(_)) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_USAGE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<slotmil::Error> for CliError {
    fn from(e: slotmil::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Accepts either a dataset directory or its manifest file.
pub(crate) fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(slotmil::data::MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Args)]
pub struct PrecisionArg {
    /// Arithmetic precision of the model.
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Parser)]
#[command(name = "slotmil", version, about = "Slot-based multiple-instance learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian MIL dataset.
    Synth(SynthArgs),
    /// Train a model, optionally with k-fold cross-validation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Export per-patch attention scores and top-100 entropy.
    AttnExport(AttnArgs),
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth::cmd_synth(&a).map(|_| ()),
        Command::Train(a) => train::cmd_train(&a).map(|_| ()),
        Command::Eval(a) => eval::cmd_eval(&a).map(|_| ()),
        Command::AttnExport(a) => attn::cmd_attn_export(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
