//! `trd`: generate toy data, train, evaluate and score single image pairs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trd_core::FusionStrategy;

use commands::{default_out, Classify, CmdResult, InferInputs, EXIT_USAGE};
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "trd", version, about = "Dual-branch RGB + depth anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training order, student initialisation and toy data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Backbone profile: toy or full.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Map fusion: norm_sum, sum_raw or product.
    #[arg(long, global = true)]
    fusion: Option<FusionStrategy>,
    /// Dataset root (overrides data.root and TRD_DATA_ROOT).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset in the loader layout.
    MakeToy {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and calibrate it on the validation split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the test split and write metric reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write per-sample float grids and heatmaps.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Score one RGB + depth pair.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        /// Depth TIFF, or an image with --three-d-image.
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        three_d_image: bool,
    },
}

fn resolve(common: &Common, epochs: Option<usize>) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref()).usage()?;
    cfg.apply(&Overrides {
        seed: common.seed,
        profile: common.profile.clone(),
        fusion: common.fusion,
        data_root: common.data_root.clone(),
        epochs,
    });
    cfg.resolve().usage()
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::MakeToy { common } => {
            let cfg = resolve(&common, None)?;
            let out = common.out.unwrap_or_else(|| default_out("toy"));
            commands::make_toy(&cfg, &out)
        }
        Command::Train { common, epochs, resume } => {
            let cfg = resolve(&common, epochs)?;
            let out = common.out.unwrap_or_else(|| default_out("train"));
            commands::train(&cfg, &out, resume.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            dump_maps,
        } => {
            let cfg = resolve(&common, None)?;
            let out = common.out.clone().unwrap_or_else(|| default_out("eval"));
            commands::eval(&cfg, &checkpoint, &out, dump_maps, common.profile.is_some())
        }
        Command::Infer {
            common,
            checkpoint,
            rgb,
            depth,
            three_d_image,
        } => {
            let cfg = resolve(&common, None)?;
            let out = common.out.clone().unwrap_or_else(|| default_out("infer"));
            let inputs = InferInputs {
                rgb: &rgb,
                three_d: &depth,
                three_d_is_image: three_d_image,
            };
            commands::infer(&cfg, &checkpoint, inputs, &out, common.profile.is_some())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
