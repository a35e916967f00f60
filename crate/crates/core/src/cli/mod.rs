//! The `ctxsub` command line.
//!
//! Exit codes: 0 on success, 2 on a usage error (bad or conflicting flags,
//! detected before anything is written), 1 when a stage fails at run time.

mod commands;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::atomic::write_atomic;
use crate::error::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "ctxsub", version, about = "Neighbor subspaces, retrieval heads and their evaluation")]
pub struct Cli {
    /// Worker threads for query and episode parallelism (0: one per core).
    #[arg(long, global = true, env = "CTXSUB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bank and episode file.
    Gen(GenArgs),
    /// Build a search index over a bank.
    Index(IndexArgs),
    /// Nearest bank rows of each query vector.
    Knn(KnnArgs),
    /// Neighbor subspaces of every episode's targets.
    Embed(EmbedArgs),
    /// Train a head or a task discriminator.
    Train(TrainArgs),
    /// Recall of a trained head, or accuracy of a discriminator.
    Eval(EvalArgs),
    /// Train and evaluate over a hyperparameter grid.
    Sweep(SweepArgs),
    /// Compare analytic head gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricArg {
    L2,
    Cosine,
    InnerProduct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Nesa,
    Neha,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingArg {
    SPlus,
    SMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Combined,
    Nno,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadArg {
    MainPlusContext,
    SingleFc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetArg {
    Head,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreArg {
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssistArg {
    None,
    Subspaces,
    NeighborMean,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    /// Number of bank rows.
    #[arg(long, default_value_t = 500)]
    pub bank: usize,
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    /// Negatives per episode.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub context_noise: f64,
    /// Context length (default: --dim).
    #[arg(long)]
    pub context_dim: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    pub metric: MetricArg,
    /// Coarse partitions; 0 builds a flat index.
    #[arg(long, default_value_t = 0)]
    pub partitions: usize,
    /// Partitions visited per query (default: 1).
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where neighbor search happens: a saved index, or a flat scan.
#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    /// Saved index; without it the bank is scanned exhaustively.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Metric of the exhaustive scan.
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine, conflicts_with = "index")]
    pub metric: MetricArg,
}

#[derive(Debug, Args, Serialize)]
pub struct KnnArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Query vectors, as a bank file.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub eta: usize,
    /// Output JSON Lines file, one line per query.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SubspaceArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Nesa)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    pub eta: usize,
    #[arg(long, default_value_t = 4)]
    pub eta_prime: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// Soft weight applied to neighbors of negative targets.
    #[arg(long, value_enum, default_value_t = WeightingArg::SPlus)]
    pub negative_weighting: WeightingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub episodes: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub subspace: SubspaceArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub init_scale: f64,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub episodes: PathBuf,
    #[arg(long, value_enum, default_value_t = TargetArg::Head)]
    pub target: TargetArg,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Combined)]
    pub objective: ObjectiveArg,
    #[arg(long, value_enum, default_value_t = HeadArg::MainPlusContext)]
    pub head: HeadArg,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub subspace: SubspaceArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub episodes: PathBuf,
    /// Directory of a trained head.
    #[arg(long, required_unless_present = "discriminator", conflicts_with = "discriminator")]
    pub head: Option<PathBuf>,
    /// Directory of a trained discriminator.
    #[arg(long)]
    pub discriminator: Option<PathBuf>,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub l: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ScoreArg::Cosine)]
    pub score: ScoreArg,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub episodes: PathBuf,
    /// Trailing episodes held out for evaluation.
    #[arg(long, default_value_t = 100)]
    pub test_episodes: usize,
    /// Axes such as `eta=2..7,eta_prime=0..7,sigma=0.1|0.5`.
    #[arg(long)]
    pub grid: String,
    /// Reported value: R@1, R@2, R@3 or loss (final epoch mean).
    #[arg(long, default_value = "R@1")]
    pub report: String,
    /// Largest grid the sweep will run.
    #[arg(long, default_value_t = crate::eval::DEFAULT_GRID_CAP)]
    pub cap: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Combined)]
    pub objective: ObjectiveArg,
    #[arg(long, value_enum, default_value_t = HeadArg::MainPlusContext)]
    pub head: HeadArg,
    #[arg(long, value_enum, default_value_t = ScoreArg::Cosine)]
    pub score: ScoreArg,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub subspace: SubspaceArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Output prefix: writes `<out>.csv` and `<out>.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 6)]
    pub context_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub descriptor_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub eta_prime: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = HeadArg::MainPlusContext)]
    pub head: HeadArg,
    #[arg(long, value_enum, default_value_t = AssistArg::Subspaces)]
    pub assist: AssistArg,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Minimum distance of every hinge and ReLU input from its kink.
    #[arg(long, default_value_t = 1e-3)]
    pub margin: f64,
    /// Largest acceptable relative error; exceeding it is a failure.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub seed: u64,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command: bad flags, or an error from the pipeline.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// One per run, next to the run's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub version: String,
    pub wall_time_seconds: f64,
}

/// What a command produced, and where its manifest goes.
pub(crate) struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub manifest: PathBuf,
    /// Set when the command ran to completion but its check failed.
    pub failure: Option<String>,
}

/// Manifest location for a command whose output is a single file.
pub(crate) fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(_) => "gen",
        Command::Index(_) => "index",
        Command::Knn(_) => "knn",
        Command::Embed(_) => "embed",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Sweep(_) => "sweep",
        Command::Gradcheck(_) => "gradcheck",
    }
}

fn config_json(c: &Command) -> serde_json::Value {
    let v = match c {
        Command::Gen(a) => serde_json::to_value(a),
        Command::Index(a) => serde_json::to_value(a),
        Command::Knn(a) => serde_json::to_value(a),
        Command::Embed(a) => serde_json::to_value(a),
        Command::Train(a) => serde_json::to_value(a),
        Command::Eval(a) => serde_json::to_value(a),
        Command::Sweep(a) => serde_json::to_value(a),
        Command::Gradcheck(a) => serde_json::to_value(a),
    };
    v.expect("flags serialize")
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let threads = cli.threads.unwrap_or(0);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::debug!("thread pool already configured: {e}");
    }
    let start = Instant::now();
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Index(a) => commands::index(a),
        Command::Knn(a) => commands::knn(a),
        Command::Embed(a) => commands::embed(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    let record = match result {
        Ok(r) => r,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            return 2;
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let manifest = RunManifest {
        command: command_name(&cli.command).to_owned(),
        config: config_json(&cli.command),
        inputs: record.inputs,
        outputs: record.outputs,
        seed: record.seed,
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    if let Err(e) = write_atomic(&record.manifest, text.as_bytes()) {
        eprintln!("error: {e}");
        return 1;
    }
    match record.failure {
        Some(msg) => {
            eprintln!("error: {msg}");
            1
        }
        None => 0,
    }
}

/// Entry point of the binary.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn flag_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sibling_manifest_appends_suffix() {
        assert_eq!(sibling_manifest(Path::new("out/idx.neix")), PathBuf::from("out/idx.neix.manifest.json"));
    }

    #[test]
    fn seed_is_required_where_randomness_is_used() {
        for cmd in [
            vec!["ctxsub", "gen"],
            vec!["ctxsub", "index", "--bank", "b", "--out", "o"],
            vec!["ctxsub", "train", "--bank", "b", "--episodes", "e", "--out", "o"],
            vec!["ctxsub", "sweep", "--bank", "b", "--episodes", "e", "--grid", "eta=2", "--out", "o"],
            vec!["ctxsub", "gradcheck", "--out", "o"],
        ] {
            let err = Cli::try_parse_from(&cmd).unwrap_err();
            assert_eq!(err.kind(), clap::error::ErrorKind::MissingRequiredArgument, "{cmd:?}");
        }
    }
}
