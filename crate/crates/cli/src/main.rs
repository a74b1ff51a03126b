//! `partirc`: generate, partition, lower, cost, verify and search programs.

mod commands;

use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "partirc", version, about = "Incremental SPMD partitioning of tensor programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct InputArgs {
    /// Program file (.pir); may already contain loop-form tiling.
    #[arg(long)]
    pub input: PathBuf,
    /// Replace the program's mesh, e.g. `model=4,data=2`.
    #[arg(long)]
    pub mesh: Option<String>,
}

#[derive(Args, Clone)]
pub struct CostArgs {
    /// Cost parameter file (`key = value` lines).
    #[arg(long)]
    pub cost_params: Option<PathBuf>,
    /// Absolute memory budget; disables the replicated-peak budget.
    #[arg(long)]
    pub budget_bytes: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModelKind {
    Linear,
    Transformer,
    Mlp,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a model-zoo or random program.
    Gen(GenArgs),
    /// Apply tiling actions and propagate them.
    Propagate(PropagateArgs),
    /// Lower a (tiled) program to SPMD text.
    Lower(LowerArgs),
    /// Cost report of the lowered program.
    Cost(PlannedArgs),
    /// Check the SPMD program against the unpartitioned one.
    Verify(VerifyArgs),
    /// Search for a partitioning plan.
    Search(SearchArgs),
    /// Re-apply a plan file and report the result.
    Replay(ReplayArgs),
    /// Generate labelled programs and train the argument ranker.
    TrainRanker(TrainArgs),
    /// Rank a program's arguments with a trained model.
    Score(ScoreArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 32)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub seq: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long)]
    pub mlp_bias: bool,
    #[arg(long)]
    pub ln_gain: bool,
    /// MLP layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16,64,16")]
    pub widths: Vec<usize>,
    /// Append MLP gradients to the result.
    #[arg(long)]
    pub grads: bool,
    /// Random program: number of ops.
    #[arg(long, default_value_t = 10)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mesh for zoo models, e.g. `model=2`.
    #[arg(long, default_value = "model=2")]
    pub mesh: String,
}

#[derive(Args)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Tile action `value:dim:axis`; repeatable, applied in order.
    #[arg(long = "tile")]
    pub tiles: Vec<String>,
    /// Wrap a value as atomic on every axis; repeatable.
    #[arg(long = "atomic")]
    pub atomic: Vec<String>,
    /// Run infer_rest after propagation.
    #[arg(long)]
    pub infer_rest: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct LowerArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PlannedArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Binary tensors, one per argument, used instead of random inputs.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
}

#[derive(Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Mesh axes the search may tile along (default: all).
    #[arg(long, value_delimiter = ',')]
    pub auto_axes: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub max_decisions: usize,
    #[arg(long, default_value_t = 1.414)]
    pub uct_c: f64,
    /// Share one action among same-role values across layers.
    #[arg(long)]
    pub group_scopes: bool,
    /// Run infer_rest after every tiling step.
    #[arg(long)]
    pub infer_every_step: bool,
    /// Ranker model restricting the argument worklist.
    #[arg(long)]
    pub ranker: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    pub top_k: usize,
    /// Ignore `--ranker`.
    #[arg(long)]
    pub no_ranker: bool,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Run N searches with seeds seed..seed+N and print one row per run.
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Plan file (or, with --repeat, the row table).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub spmd_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub plan: PathBuf,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Tiled program in loop form.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub spmd_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Number of generated training programs.
    #[arg(long, default_value_t = 50)]
    pub programs: usize,
    /// Further programs held out to measure top-k retention.
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
    #[arg(long, default_value_t = 25)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub top_k: usize,
}

/// Raised when an internal invariant breaks; maps to exit code 70.
#[derive(Debug, thiserror::Error)]
#[error("internal error: {0}")]
pub struct Internal(pub String);

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Propagate(a) => commands::propagate(a),
        Command::Lower(a) => commands::lower(a),
        Command::Cost(a) => commands::cost(a),
        Command::Verify(a) => commands::verify(a),
        Command::Search(a) => commands::search(a),
        Command::Replay(a) => commands::replay(a),
        Command::TrainRanker(a) => commands::train_ranker(a),
        Command::Score(a) => commands::score(a),
    }
}

fn main() -> ExitCode {
    // Usage errors exit with 2 inside clap.
    let cli = Cli::parse();
    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) if e.is::<Internal>() => {
            eprintln!("partirc: {e:#}");
            ExitCode::from(70)
        }
        Ok(Err(e)) => {
            eprintln!("partirc: {e:#}");
            ExitCode::from(1)
        }
        Err(_) => ExitCode::from(70),
    }
}
