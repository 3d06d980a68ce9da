//! `pamfn`: synthesize data, pretrain branches, train, evaluate, and check
//! gradients.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pamfn::config::{BaselineStrategy, DecoderVariant, FusionVariant};
use pamfn::data::{Modality, Split};
use pamfn::gradcheck::Suite;
use pamfn::PamfnError;

#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(anyhow::anyhow!(msg.into()))
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(anyhow::anyhow!(msg.into()))
    }
}

impl From<PamfnError> for CliError {
    fn from(e: PamfnError) -> Self {
        if e.is_usage() {
            Self::Usage(e.into())
        } else {
            Self::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "pamfn", version, about = "Multimodal action quality assessment runs")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "PAMFN_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (manifest, labels, feature containers).
    Synth(SynthArgs),
    /// Phase 1: train one modality branch.
    Pretrain(PretrainArgs),
    /// Phase 2: train the mixed branch on pretrained branches.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator spec (TOML); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the run name (the directory under the run root).
    #[arg(long)]
    run: Option<String>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    modality: Modality,
    /// Override phase-1 epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelOverrides {
    /// FusionNet routing: ranked, unranked or free.
    #[arg(long)]
    variant: Option<FusionVariant>,
    /// Decoder ablation: full, no_msfd, no_cmfd, weighted_for_msfd,
    /// weighted_for_cmfd or weighted_for_both.
    #[arg(long)]
    decoder: Option<DecoderVariant>,
    /// Stages (1-based) at which decoders and fusion run.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    fusion_stages: Option<Vec<usize>>,
    /// Number of FusionNets per stage.
    #[arg(long = "K", alias = "k")]
    k: Option<usize>,
    /// Train a late-fusion baseline instead: avg, cat, weighted or attention.
    #[arg(long)]
    baseline: Option<BaselineStrategy>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    model: ModelOverrides,
    /// Train everything jointly from scratch; no pretrained branches needed.
    #[arg(long)]
    one_stage: bool,
    /// Directory holding `<modality>/last.json` branch checkpoints
    /// (default: the run's `pretrain/`).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Override phase-2 epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate (default: the run's `train/last.json`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write per-time-step routing decisions to `decisions.csv`.
    #[arg(long)]
    dump_decisions: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Restrict to one module: branch, msfd, afm, cmfd or network.
    #[arg(long)]
    module: Option<Suite>,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Test fixture: corrupt the analytic gradient of this parameter.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a.spec.as_deref(), &a.out, a.seed),
        Command::Pretrain(a) => commands::pretrain(&cli.run_root, &a.run, a.modality, a.epochs),
        Command::Train(a) => commands::train(&cli.run_root, &a),
        Command::Eval(a) => commands::eval(&cli.run_root, &a),
        Command::Gradcheck(a) => commands::gradcheck(a.module, a.seed, a.corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
