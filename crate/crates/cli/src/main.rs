//! `sticker-select`: generate data, train, evaluate, check gradients and
//! run ablations from one binary.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sticker_core::Error;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sticker-select", version, about = "Emotion- and intention-guided sticker response selection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file with [data], [encoder], [alignment],
    /// [fusion], [ablation], [train] and [paths] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap; recorded in the manifest. Execution is single-threaded.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test corpus.
    GenData {
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Train a model and write a checkpoint and step log.
    Train(TrainArgs),
    /// Score a split and print ranking metrics as percentages.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate each configuration of an ablation preset.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, required_unless_present = "untrained", conflicts_with = "untrained")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate freshly initialized parameters.
    #[arg(long)]
    pub untrained: bool,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Coordinates checked per parameter tensor; 0 checks all.
    #[arg(long, default_value_t = 40)]
    pub coords: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "table4", value_parser = ["table4", "fig3", "all"])]
    pub preset: String,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "42")]
    pub seeds: Vec<u64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Degenerate(_) | Error::Shape { .. } => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::NonFinite(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut overrides = cli.common.set.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("data.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    match &cli.command {
        Command::GenData { n_samples: Some(n) } => overrides.push(format!("data.n_samples={n}")),
        Command::Train(a) => {
            if let Some(v) = a.epochs {
                overrides.push(format!("train.epochs={v}"));
            }
            if let Some(v) = a.lr {
                overrides.push(format!("train.lr={v:e}"));
            }
            if let Some(v) = a.max_steps {
                overrides.push(format!("train.max_steps={v}"));
            }
        }
        _ => {}
    }
    let result = RunConfig::load(cli.common.config.as_deref(), &overrides).and_then(|cfg| {
        let run = commands::Run {
            cfg,
            out: cli.common.out.clone(),
            threads: cli.common.threads as usize,
        };
        match &cli.command {
            Command::GenData { .. } => run.gen_data(),
            Command::Train(a) => run.train(a),
            Command::Eval(a) => run.eval(a),
            Command::Gradcheck(a) => run.gradcheck(a),
            Command::Ablate(a) => run.ablate(a),
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
