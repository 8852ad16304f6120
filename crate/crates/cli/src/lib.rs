//! Library side of the `rcl-lab` command-line tool.

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Generate or ingest images and write clean/noisy pairs plus a manifest.
    Simulate,
    /// Pre-train a network (rcl, n2n, n2s or consistency-only).
    Pretrain,
    /// Fine-tune a checkpoint on labelled pairs and score it.
    Finetune,
    /// Proxy evaluation: fresh head, frozen body, fine-tune, score per trial.
    Evaluate,
    /// Residual density analysis or label-efficiency sweep.
    Analyze,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Analyze => "analyze",
        }
    }
}

const AFTER_HELP: &str = "\
Outputs (all CSV files carry a header row):
  simulate   manifest.csv (clean,noisy,lambda_shot,lambda_read,noise_seed), images/*.rct
  pretrain   checkpoint.rcl, loss.csv (step,loss)
  finetune   finetuned.rcl, metrics.csv, per_image.csv, body_hash.txt
  evaluate   metrics.csv (task,method,trial,seed,images,psnr,ssim; last row trial=mean), per_image.csv
  analyze    density.csv (phase,index,emd_difference) or sweep.csv (labels,sl_psnr,sl_ssim,rcl_sl_psnr,rcl_sl_ssim)
Every command writes config.resolved, which reproduces the run when passed back as --config.";

#[derive(Debug, Parser)]
#[command(name = "rcl-lab", version, about = "Residual contrastive pre-training experiments", after_help = AFTER_HELP)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: runs/<command>-seed<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = config::RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cli.command.name(), cfg.seed)));
    commands::dispatch(cli.command.name(), &cfg, &out)
}
