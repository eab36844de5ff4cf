mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{EvalFlags, GenFlags, Stage1Flags};

/// Multi-modal semantic ID tokenization and generative sequential recommendation.
///
/// Directory arguments default to `$SEMREC_DATA_ROOT/<name>` (or `./<name>`).
#[derive(Debug, Parser)]
#[command(name = "semrec", version)]
pub struct Cli {
    /// Worker threads for tensor kernels; 1 is fully deterministic
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// TOML file with [synth], [ingest], [stage1], [generator] and [eval] sections
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a dataset from an interaction log and two embedding files
    Ingest(IngestArgs),
    /// Generate a synthetic behavior-correlated dataset
    Synth(SynthArgs),
    /// Train the stage-1 tokenizer
    TrainQuant(TrainQuantArgs),
    /// Quantize the catalog into semantic IDs
    AssignIds(AssignIdsArgs),
    /// Train the stage-2 generator
    TrainGen(TrainGenArgs),
    /// Evaluate a generator checkpoint
    Evaluate(EvaluateArgs),
    /// Train and compare ablation variants and hyperparameter sweeps
    Ablate(AblateArgs),
    /// Audit semantic-ID collisions
    Collisions(CollisionsArgs),
    /// Measure per-sample generation latency
    Bench(BenchArgs),
    /// Render plots from a saved report
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// TSV of user, item, timestamp
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainQuantArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub stage1: Stage1Flags,
}

#[derive(Debug, Args)]
pub struct AssignIdsArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stage-1 checkpoint directory
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainGenArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Semantic-ID directory written by assign-ids
    #[arg(long)]
    pub ids: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator checkpoint directory written by train-gen
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated subset of full, no-mim, no-rec, no-u, s, e, no-id, no-text, no-image
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Sweep on the full model, e.g. `L=1,2,3,4`; repeatable (L, N, D or K)
    #[arg(long)]
    pub sweep: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub stage1: Stage1Flags,
    #[command(flatten)]
    pub gen: GenFlags,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Args)]
pub struct CollisionsArgs {
    /// Semantic-ID directory
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Where to write the audit; printed only when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "50,100")]
    pub beams: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Test histories timed per repeat
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// An ablation, stage-1 or generator training report (JSON)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = match (&cli.command, cli.workers) {
        (_, Some(w)) => Some(w),
        (Command::Bench(_), None) => Some(1),
        _ => None,
    };
    if let Some(w) = workers {
        if w == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(2);
        }
        std::env::set_var("RAYON_NUM_THREADS", w.to_string());
    }
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        super::Cli::command().debug_assert();
    }
}
