//! `home-equiv`: generate multi-view corpora, pretrain, train, evaluate and
//! export representations. Exit codes: 0 ok, 1 selfcheck failure, 2 usage,
//! 3 IO or data, 4 missing prerequisite.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use home_equiv_core::trainer::Regime;
use home_equiv_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "home-equiv",
    version,
    about = "Homography-equivariant representation learning"
)]
struct Cli {
    /// JSON file with optional `data` and `train` sections; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded multi-view corpus and its manifest.
    Gen(GenArgs),
    /// Train the encoder and VN stack on the Frobenius loss.
    Pretrain(PretrainArgs),
    /// Train a classifier under one of the five regimes.
    Train(TrainArgs),
    /// Accuracy and confusion counts of a checkpoint on one split.
    Eval(EvalArgs),
    /// Export per-view representations as CSV.
    Embed(EmbedArgs),
    /// Run the fast invariant suite.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// Image size as WxH.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

/// Schedule and model flags shared by `pretrain` and `train`.
#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    n_dim: Option<usize>,
    /// Metrics log path (default: `<out>.metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Stop after this many completed epochs; the checkpoint can be resumed.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Continue the run saved in this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: TrainFlags,
    /// Drop the VN layers, keeping only the three projection heads.
    #[arg(long)]
    no_vn: bool,
    /// Supervised encoder pretraining on the auxiliary corpus (for sup-tl).
    #[arg(long)]
    supervised_aux: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainFlags,
    #[arg(long)]
    regime: Option<Regime>,
    /// Checkpoint to freeze or warm-start from.
    #[arg(long, conflicts_with = "random_encoder")]
    from: Option<PathBuf>,
    /// Start from an untrained encoder (frozen-random control).
    #[arg(long)]
    random_encoder: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    /// Feed every view to the classifier as extra rows.
    #[arg(long)]
    all_views: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: home_equiv_core::Split,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to one split (default: every sample).
    #[arg(long, value_parser = parse_split)]
    split: Option<home_equiv_core::Split>,
}

#[derive(Debug, Args)]
struct SelfcheckArgs {
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let dim = |v: &str| {
        v.parse::<usize>()
            .map_err(|e| format!("bad dimension {v:?}: {e}"))
    };
    Ok((dim(w)?, dim(h)?))
}

fn parse_split(s: &str) -> Result<home_equiv_core::Split, String> {
    home_equiv_core::Split::parse(s)
        .ok_or_else(|| format!("unknown split {s:?} (train, val, test)"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BadConfig(_) | Error::NegativeAlpha(_) => 2,
        Error::MissingCheckpoint(_) | Error::RegimePrereqViolation(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(cli.config.as_deref(), a),
        Command::Pretrain(a) => commands::pretrain(cli.config.as_deref(), a),
        Command::Train(a) => commands::train(cli.config.as_deref(), a),
        Command::Eval(a) => commands::eval(a),
        Command::Embed(a) => commands::embed(a),
        Command::Selfcheck(a) => commands::selfcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
