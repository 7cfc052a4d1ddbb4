//! Command-line interface: train, evaluate, generate synthetic data, and
//! export embeddings.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fewfuse_core::config::RunConfig;
use fewfuse_core::episodes::{generate_synthetic, save_manifest, Split, SyntheticSpec};
use fewfuse_core::error::Error;
use fewfuse_core::train::{evaluate_checkpoint, export_checkpoint_embeddings, run_training};

#[derive(Parser)]
#[command(name = "fewfuse", version, about = "Few-shot multi-modal fusion engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config and write outputs into a directory.
    Train {
        /// Path to the run-config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for config.json, metrics.csv, timings.csv and
        /// best.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: mean episode accuracy and 95% interval.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest file to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// meta_train | meta_val | meta_test
        #[arg(long, default_value = "meta_test")]
        split: String,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset manifest from a spec file.
    GenData {
        /// Path to the SyntheticSpec JSON file.
        #[arg(long)]
        spec: PathBuf,
        /// Manifest output path (a split sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-item embeddings for external projection (UMAP/t-SNE).
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "meta_test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::Shape { .. } => 4,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out } => {
            let config = RunConfig::from_file(&config)?;
            let report = run_training(&config, &out)?;
            println!(
                "done: best meta-val accuracy {:.2}% at epoch {} | checkpoint {}",
                report.best_val_accuracy,
                report.best_epoch,
                report.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Evaluate { checkpoint, data, split, episodes, seed } => {
            let split: Split = split.parse()?;
            let (acc, ci) = evaluate_checkpoint(&checkpoint, &data, split, episodes, seed)?;
            println!("accuracy: {acc:.2} +- {ci:.2} ({episodes} episodes, {split})");
            Ok(())
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", spec.display())))?;
            let spec: SyntheticSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
            let manifest = generate_synthetic(&spec)?;
            save_manifest(&manifest, &out)?;
            println!(
                "wrote {} items over {} classes to {}",
                manifest.items.len(),
                manifest.class_items.len(),
                out.display()
            );
            Ok(())
        }
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
            split,
            classes,
            per_class,
            seed,
        } => {
            let split: Split = split.parse()?;
            let rows = export_checkpoint_embeddings(
                &checkpoint,
                &data,
                split,
                classes,
                per_class,
                seed,
                &out,
            )?;
            println!("wrote {rows} embedding rows to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
