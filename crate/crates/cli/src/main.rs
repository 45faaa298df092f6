//! `rlsum`: synthetic data, NLL warm start, RL fine-tuning, γ sweeps,
//! evaluation and analysis from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rlsum_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rlsum", version, about = "RL fine-tuning toolkit for summarization")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON config file merged over the built-in defaults [default: none]
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for training and sampling; beats the config file, which beats $RLSUM_SEED [default: 13]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (gen-data: output file) [default: runs/<command>, gen-data: corpus.jsonl]
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Config override as dotted key=value, e.g. train.learning_rate=0.3; repeatable [default: none]
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus as JSONL
    GenData(GenDataArgs),
    /// NLL warm start from a JSONL corpus
    Train(TrainArgs),
    /// RL fine-tuning of a warm-started checkpoint
    Finetune(FinetuneArgs),
    /// Fine-tune once per γ with the REINFORCE proxy and pick the best
    SweepGamma(SweepArgs),
    /// Score checkpoints on the test split
    Evaluate(EvaluateArgs),
    /// Bootstrap significance, novelty and length buckets from evaluate output
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Synthetic task spec (JSON); used in place of --config [default: none]
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Number of examples
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// JSONL corpus; sets data.path [default: from config]
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Few-shot regime: 1000 examples, 2000 iterations [default: false]
    #[arg(long)]
    pub few_shot: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Warm-start checkpoint file or run directory [required]
    #[arg(long, value_name = "PATH")]
    pub warm_start: PathBuf,
    /// RL objective {nll|rwb-hinge|risk2|risk3} [default: rwb-hinge]
    #[arg(long)]
    pub objective: Option<String>,
    /// Mixing weight of the NLL term [default: 0.9]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Few-shot regime: 1000 examples, 2000 iterations [default: false]
    #[arg(long)]
    pub few_shot: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Warm-start checkpoint file or run directory [required]
    #[arg(long, value_name = "PATH")]
    pub warm_start: PathBuf,
    /// Comma-separated γ values [default: 0.1,0.3,0.5,0.7,0.9]
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Report format {csv|json} [default: csv]
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// System to score as NAME=PATH (checkpoint file or run directory); repeatable [required]
    #[arg(long = "system", value_name = "NAME=PATH", required = true)]
    pub systems: Vec<String>,
    /// Report format {csv|json} [default: csv]
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// scores.json written by `evaluate` [required]
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// System the others are tested against [default: nll]
    #[arg(long)]
    pub baseline: Option<String>,
    /// Report format {csv|json} [default: csv]
    #[arg(long)]
    pub format: Option<String>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::State(_) => 1,
        Error::Io { .. } | Error::Parse { .. } => 2,
        Error::NonFinite(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
