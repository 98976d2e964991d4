//! `mavgram`: synthetic data generation, feature dumps, pre-training, fine-tuning,
//! evaluation and ablation tables for acoustic-vibration fault diagnosis.

mod ablate;
mod commands;
mod config;
mod rundir;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use ablate::AblateArgs;
use commands::{OutArgs, ProfileName};
use config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(name = "mavgram", version, about = "Acoustic-vibration bearing fault diagnosis")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic source or target dataset with its manifest.
    Synth {
        #[arg(long, value_enum)]
        profile: ProfileName,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Dump feature maps of every manifest record into a cache file.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint supplying the learned temporal front ends; without it only log-mel
        /// maps are written.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train every layer on the manifest's training records.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Adapt a pre-trained checkpoint on a share of the target records, then evaluate.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Fine-tune budget as a percentage of the target records (1 to 25).
        #[arg(long)]
        percent: u32,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Evaluate a checkpoint on the fixed target test split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Budget the checkpoint was fine-tuned with; labels the accuracy row.
        #[arg(long)]
        percent: u32,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the transfer protocol over variants or speed grids and tabulate accuracies.
    Ablate {
        #[command(flatten)]
        ablate: AblateArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp_secs()
        .init();
    match &cli.command {
        Command::Synth {
            profile,
            per_class,
            seed,
            out,
        } => commands::synth(*profile, *per_class, *seed, out),
        Command::Featurize {
            manifest,
            ckpt,
            config,
            out,
        } => commands::featurize(manifest, ckpt.as_deref(), config, out),
        Command::Pretrain { manifest, config, out } => commands::cmd_pretrain(manifest, config, out),
        Command::Finetune {
            manifest,
            ckpt,
            percent,
            config,
            out,
        } => commands::cmd_finetune(manifest, ckpt, *percent, config, out),
        Command::Eval {
            manifest,
            ckpt,
            percent,
            config,
            out,
        } => commands::cmd_eval(manifest, ckpt, *percent, config, out),
        Command::Ablate { ablate, config, out } => ablate::ablate(ablate, config, out),
    }
}
