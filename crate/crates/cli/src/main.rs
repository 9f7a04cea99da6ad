//! `ntkw`: kernels, generalization bounds, SGD runs and lemma checks for wide ReLU networks.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod run;
mod source;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAIL: i32 = 1;
pub const EXIT_ARGS: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "ntkw", version, about = "Neural tangent kernel experiments for wide ReLU networks")]
pub struct Cli {
    /// Global seed; every random stream derives from it. Generated and echoed when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for outputs and the run manifest.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Flat `key=value` file of flag defaults; command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Compute the NTK matrix of a dataset.
    Kernel(KernelArgs),
    /// Generalization-bound quantities.
    #[command(subcommand)]
    Bound(BoundCmd),
    /// One pass of SGD from Gaussian initialization.
    Train(TrainArgs),
    /// Empirical checks of the structural lemmas.
    Verify(VerifyArgs),
    /// Dataset management.
    #[command(subcommand)]
    Data(DataCmd),
    /// Re-run a manifest and compare artifact checksums.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Synthetic kernel-realizable data: `n=N,d=D[,test=T]`.
    #[arg(long, value_name = "SPEC", conflicts_with_all = ["data", "dataset"])]
    pub synth: Option<source::SynthSpec>,
    /// Named dataset.
    #[arg(long, value_enum, conflicts_with = "dataset")]
    pub data: Option<DataName>,
    /// Positive and negative digit.
    #[arg(long, value_delimiter = ',', num_args = 1, action = clap::ArgAction::Set, default_value = "3,8")]
    pub classes: Vec<u8>,
    /// Training examples drawn from the named dataset.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Held-out examples drawn from the named dataset.
    #[arg(long, default_value_t = 0)]
    pub test_n: usize,
    /// IDX split of the named dataset.
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    /// Dataset cache file written by `kernel`.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataName {
    Mnist,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct KernelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Kernel file name inside the output directory.
    #[arg(long, default_value = "kernel.bin")]
    pub out: PathBuf,
    /// Also store the last-layer Σ and Θ̃.
    #[arg(long)]
    pub sections: bool,
}

#[derive(Subcommand, Debug)]
pub enum BoundCmd {
    /// NTRF bound first term by projected SGD over a width and radius grid.
    Ntrf(NtrfArgs),
    /// Kernel bound `L·√(yᵀΘ⁻¹y/n)` from a stored kernel.
    Kernel(BoundKernelArgs),
    /// `√(yᵀΘ⁻¹y/n)` under random label flips.
    FlipSweep(FlipSweepArgs),
}

#[derive(Args, Debug)]
pub struct NtrfArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Ball radii.
    #[arg(long = "R", value_delimiter = ',', num_args = 1, action = clap::ArgAction::Set, default_value = "10")]
    pub radii: Vec<f64>,
    /// Widths.
    #[arg(long = "m", value_delimiter = ',', num_args = 1, action = clap::ArgAction::Set, default_value = "1024")]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Initial step size (default `16·R/(m√n)`).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initializations per width.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Confidence level of the bound.
    #[arg(long, default_value_t = ntkw_core::bounds::DEFAULT_DELTA)]
    pub delta: f64,
}

#[derive(Args, Debug)]
pub struct BoundKernelArgs {
    /// Kernel file written by `kernel`.
    #[arg(long, value_name = "FILE")]
    pub kernel: PathBuf,
    /// `data` for the dataset cache stored next to the kernel, or a cache file.
    #[arg(long, value_name = "SOURCE", default_value = "data")]
    pub labels_from: String,
}

#[derive(Args, Debug)]
pub struct FlipSweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Reuse a stored kernel instead of computing one.
    #[arg(long, value_name = "FILE")]
    pub kernel: Option<PathBuf>,
    /// With `--kernel`: `data` or a dataset cache file.
    #[arg(long, value_name = "SOURCE", default_value = "data")]
    pub labels_from: String,
    #[arg(long, value_delimiter = ',', num_args = 1, action = clap::ArgAction::Set, default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long = "m", default_value_t = 1024)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Step size `η = κ·R/(m√n)`.
    #[arg(long, default_value_t = 0.1, conflicts_with = "eta")]
    pub kappa: f64,
    /// Explicit step size.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long = "R", default_value_t = 10.0)]
    pub radius: f64,
    /// Snapshot spacing (default `⌈n/20⌉`).
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    /// Write every snapshot's parameters.
    #[arg(long)]
    pub save_snapshots: bool,
    /// Compare cumulative SGD loss with the minimum-distance NTRF interpolant.
    #[arg(long)]
    pub check_cumulative: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Lemma check(s), comma-separated, or `all`.
    #[arg(long, value_delimiter = ',', num_args = 1, action = clap::ArgAction::Set, required = true)]
    pub lemma: Vec<String>,
    #[arg(long = "m", default_value_t = 1024)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    /// Parameter pairs per seed (convexity).
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    /// Decreasing perturbation scales (default per check).
    #[arg(long, value_delimiter = ',', num_args = 1, action = clap::ArgAction::Set)]
    pub grid: Vec<f64>,
}

#[derive(Subcommand, Debug)]
pub enum DataCmd {
    /// Copy MNIST IDX files into `$NTKW_DATA_DIR/mnist`.
    Fetch(FetchArgs),
    /// Summary statistics of a dataset.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct FetchArgs {
    /// Directory holding `*-idx?-ubyte[.gz]` files (default: the bundled subset).
    #[arg(long, value_name = "DIR")]
    pub from: Option<PathBuf>,
    /// Destination root (default: `$NTKW_DATA_DIR`).
    #[arg(long, value_name = "DIR")]
    pub to: Option<PathBuf>,
    /// Overwrite existing files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

/// An error carrying its exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl Exit {
    pub fn usage(message: impl Into<String>) -> anyhow::Error {
        Exit {
            code: EXIT_ARGS,
            message: message.into(),
        }
        .into()
    }

    pub fn data(message: impl Into<String>) -> anyhow::Error {
        Exit {
            code: EXIT_DATA,
            message: message.into(),
        }
        .into()
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<ntkw_core::Error>() {
            return if e.is_numeric_error() {
                EXIT_NUMERIC
            } else if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_ARGS
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_ARGS
}

/// The clap command with self-overriding flags at every level.
pub fn command() -> clap::Command {
    fn apply(c: clap::Command) -> clap::Command {
        c.args_override_self(true).mut_subcommands(apply)
    }
    apply(Cli::command())
}

/// Parse and run `argv`, returning the exit code.
pub fn run_argv(argv: Vec<OsString>) -> i32 {
    match try_run(argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn try_run(argv: Vec<OsString>) -> anyhow::Result<i32> {
    let argv = config::inject(argv)?;
    let matches = match command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return Ok(code);
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Exit::usage(e.to_string()))?;
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Exit::usage("--threads must be at least 1"));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    commands::dispatch(cli, argv)
}

fn main() -> ExitCode {
    let code = run_argv(std::env::args_os().collect());
    ExitCode::from(code.clamp(0, 255) as u8)
}
