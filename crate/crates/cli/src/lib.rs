//! Command-line driver: data generation, pretraining, both training phases,
//! evaluation, reporting and the low-rank sweep, each writing a
//! self-describing run directory.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod rundir;

pub use rundir::{git_hash, load_config, FileRecord, RunDir, RunManifest};

/// Exit code for configuration and runtime errors.
pub const EXIT_ERROR: i32 = 1;
/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "polyinter",
    version,
    about = "Polymorphic feature interpreter experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Pretrain and freeze every encoder with its detection head.
    Pretrain(PretrainArgs),
    /// Train the interpreter with the ego and the known neighbors.
    Phase1(Phase1Args),
    /// Adapt to the new neighbor by training its prompt and resizer only.
    Phase2(Phase2Args),
    /// Evaluate a run's checkpoint and write metrics JSON.
    Eval(EvalArgs),
    /// Print a markdown table of the evaluations of one or more runs.
    Report(ReportArgs),
    /// Run Phase II plus evaluation for each low-rank (R, T) pair of the config.
    SweepRank(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct OutRunArgs {
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Name of the new run directory; it must not exist or be empty.
    #[arg(long)]
    pub run: String,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    /// Dataset file to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutRunArgs,
    /// Dataset file from `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AdapterArg {
    Matmul,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PromptInitArg {
    Sampling,
    Lowrank,
}

#[derive(Debug, Args)]
pub struct Phase1Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutRunArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrain run directory.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub channel_adapter: Option<AdapterArg>,
    #[arg(long)]
    pub normalize_qk: bool,
}

#[derive(Debug, Args)]
pub struct Phase2Args {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutRunArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Phase I run directory.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub prompt_init: Option<PromptInitArg>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub depth_factor: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Collab,
    EgoOnly,
    NoInterp,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding `manifest.json` and `ckpt.bin`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset file; defaults to the one recorded in the run manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub mode: ModeArg,
    /// Neighbor id; defaults to the Phase II neighbor for Phase II runs and
    /// the first Phase I neighbor otherwise.
    #[arg(long)]
    pub neighbor: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to tabulate.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutRunArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Phase I run directory.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code. Usage errors print clap's message and return 2.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}
