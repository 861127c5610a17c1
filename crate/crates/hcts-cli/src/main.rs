//! Executable surface: synth | train | eval | report | export.
//!
//! Exit codes are a stable contract: 0 success, 1 usage error, 2 data
//! error, 3 numeric failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{Ctx, ExportMode};
use config::RunConfigFile;
use hcts_core::error::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hcts",
    about = "Cross-domain recommendation on hyperboloid manifolds",
    version
)]
struct Cli {
    /// JSON run configuration (required by every subcommand).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config value.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic two-domain dataset.
    Synth,
    /// Train on the configured interaction files.
    Train {
        /// Drop user-user contrastive learning.
        #[arg(long)]
        no_uu: bool,
        /// Drop user-item contrastive learning.
        #[arg(long)]
        no_ui: bool,
        /// Drop item-item contrastive learning.
        #[arg(long)]
        no_ii: bool,
        /// Drop source-to-target knowledge transfer.
        #[arg(long)]
        no_s2t: bool,
        /// Drop target-to-source knowledge transfer.
        #[arg(long)]
        no_t2s: bool,
        /// Drop embedding-center calibration.
        #[arg(long)]
        no_center: bool,
        /// One shared curvature for both domains.
        #[arg(long)]
        share_curvature: bool,
        /// Euclidean ablation: identity lift, Euclidean distances.
        #[arg(long)]
        euclidean: bool,
        /// Epoch-count override.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint with full-sort HR@K / NDCG@K.
    Eval {
        /// Checkpoint path (default: <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Cutoff override.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Normalized-degree long-tail curves per domain and merged.
    Report,
    /// Dump embedding coordinates.
    Export {
        /// Checkpoint path (default: <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Coordinate chart to export.
        #[arg(long, value_enum)]
        mode: ExportMode,
    },
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| Error::usage("--config is required"))?;
    let cfg = RunConfigFile::load(&config_path)?;
    let ctx = Ctx::new(cfg, cli.seed, cli.out)?;
    match cli.command {
        Command::Synth => commands::cmd_synth(&ctx),
        Command::Train {
            no_uu,
            no_ui,
            no_ii,
            no_s2t,
            no_t2s,
            no_center,
            share_curvature,
            euclidean,
            epochs,
        } => {
            let mut ctx = ctx;
            let t = &mut ctx.cfg.train;
            t.no_uu |= no_uu;
            t.no_ui |= no_ui;
            t.no_ii |= no_ii;
            t.no_s2t |= no_s2t;
            t.no_t2s |= no_t2s;
            t.no_center |= no_center;
            t.share_curvature |= share_curvature;
            t.euclidean |= euclidean;
            if let Some(e) = epochs {
                t.epochs = e;
            }
            t.validate()?;
            commands::cmd_train(&ctx)
        }
        Command::Eval { checkpoint, k } => commands::cmd_eval(&ctx, checkpoint, k),
        Command::Report => commands::cmd_report(&ctx),
        Command::Export { checkpoint, mode } => commands::cmd_export(&ctx, checkpoint, mode),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
