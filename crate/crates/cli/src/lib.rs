//! Command-line surface: `synth`, `solve`, `train`, `eval` and `viz`.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 numerical
//! failure. `WARPGRID_THREADS` caps the worker pool.

pub mod colormap;
pub mod commands;
pub mod config;
pub mod viz;

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use warpgrid::ErrorClass;

use crate::config::SolverMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const THREADS_ENV: &str = "WARPGRID_THREADS";
pub const LOCK_FILE: &str = ".warpgrid.lock";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{path} is locked by another run (remove {lock} if stale)")]
    Locked { path: PathBuf, lock: PathBuf },
    #[error(transparent)]
    Core(#[from] warpgrid::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Io(_) | CliError::Locked { .. } => EXIT_IO,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => EXIT_USAGE,
                ErrorClass::Io => EXIT_IO,
                ErrorClass::Numeric => EXIT_NUMERIC,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Holds `out_dir/.warpgrid.lock` for the lifetime of a run.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
        let path = out_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked {
                path: out_dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(CliError::Io(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Worker count from `WARPGRID_THREADS`; `None` when unset.
pub fn thread_cap(value: Option<&str>) -> Result<Option<usize>, CliError> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "warpgrid",
    version,
    about = "Bidirectional sampling grids: synthesis, solving, training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Dataset directory with a manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict to these pair ids.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    /// Single source image instead of a dataset.
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    /// Masks for `--source`/`--target`; full masks when absent.
    #[arg(long)]
    pub mask_s: Option<PathBuf>,
    #[arg(long)]
    pub mask_t: Option<PathBuf>,
    /// Output id for `--source`/`--target`.
    #[arg(long, default_value = "pair")]
    pub id: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        occlusion: Option<f64>,
    },
    /// Predict grids and confidences for pairs.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pairs: PairArgs,
        /// Replaces every stage budget of the direct solver.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_enum)]
        solver: Option<SolverMode>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the staged predictor training.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Keypoint-only split standing in for real data.
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        held_out: Option<PathBuf>,
        /// Replaces every stage budget.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score predictions against a dataset's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Score the ground-truth grids themselves.
        #[arg(long, conflicts_with = "pred")]
        ground_truth: bool,
    },
    /// Render warped image, checkerboard, cycle-error heatmap and confidence.
    Viz {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pairs: PairArgs,
        #[arg(long)]
        pred: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let cap = thread_cap(std::env::var(THREADS_ENV).ok().as_deref())?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cap {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| commands::dispatch(cli.command))
}

/// Creates an empty file, failing on I/O errors with the path attached.
pub(crate) fn create_file(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_classes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(warpgrid::Error::InvalidValue("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(warpgrid::Error::MissingFile("a".into())).exit_code(), 3);
        assert_eq!(CliError::Core(warpgrid::Error::NonFinite("x".into())).exit_code(), 4);
    }

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(thread_cap(None).unwrap(), None);
        assert_eq!(thread_cap(Some("3")).unwrap(), Some(3));
        assert!(thread_cap(Some("0")).is_err());
        assert!(thread_cap(Some("many")).is_err());
    }

    #[test]
    fn lock_excludes_a_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(CliError::Locked { .. })));
        drop(first);
        assert!(RunLock::acquire(dir.path()).is_ok());
        assert!(!dir.path().join(LOCK_FILE).exists());
    }

    #[test]
    fn negative_count_is_a_usage_error() {
        assert_eq!(run(["warpgrid", "synth", "--count", "-1", "--out", "x"]), EXIT_USAGE);
    }
}
