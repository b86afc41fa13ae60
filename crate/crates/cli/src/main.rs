//! `nanoseg`: synthesize scenes, pseudo-label micrographs, train and apply
//! segmentation networks, and evaluate or inspect them.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{Precision, SplitChoice};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "nanoseg", version, about = "Nanoparticle segmentation for electron micrographs")]
struct Cli {
    /// Run configuration (flat JSON; unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for dataset generation, splitting, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of scenes and ground-truth masks.
    Synth {
        /// Number of scenes (overrides `count` in the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pseudo-label a directory of micrographs with the classical pipeline.
    Label {
        /// Directory of PGM images.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a network (or an ablation grid) on a dataset directory.
    Train {
        /// Dataset directory (synth output or image/mask pairs).
        #[arg(long)]
        data: PathBuf,
        /// Train every entry of an ablation grid. With no file, the grid
        /// from the config or the default 15-run grid is used.
        #[arg(long, num_args = 0..=1)]
        grid: Option<Option<PathBuf>>,
        /// Override the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        /// Also write an SVG loss chart.
        #[arg(long)]
        plot: bool,
    },
    /// Segment images with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of PGM images.
        #[arg(long)]
        input: PathBuf,
        /// A threshold in [0, 1] or `otsu` (overrides the config).
        #[arg(long)]
        threshold: Option<String>,
    },
    /// Sweep pixel metrics over thresholds on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated thresholds (overrides the config).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        /// Also write an SVG chart of precision, recall and F1.
        #[arg(long)]
        plot: bool,
    },
    /// Export learned first-layer kernels and compare them to references.
    Kernels {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Allow exporting the first layer of a deep network.
        #[arg(long)]
        first_layer: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth { n } => {
            if let Some(n) = n {
                cfg.count = n;
            }
            commands::synth_cmd(&cfg, out)
        }
        Command::Label { input } => commands::label_cmd(&cfg, &input, out, cli.threads),
        Command::Train { data, grid, epochs, precision, plot } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            match grid {
                Some(file) => commands::grid_cmd(&cfg, &data, file.as_deref(), out),
                None => commands::train_cmd(&cfg, &data, out, precision, plot),
            }
        }
        Command::Infer { checkpoint, input, threshold } => {
            if let Some(t) = threshold {
                cfg.eval.infer_threshold = t;
            }
            cfg.eval.threshold_choice().context("--threshold")?;
            commands::infer_cmd(&cfg, &checkpoint, &input, out, cli.threads)
        }
        Command::Eval { checkpoint, data, thresholds, split, plot } => {
            if let Some(t) = thresholds {
                cfg.eval.thresholds = t;
            }
            let summary = commands::eval_cmd(&cfg, &checkpoint, &data, split, out, plot)?;
            println!("{summary}");
            Ok(())
        }
        Command::Kernels { checkpoint, first_layer } => commands::kernels_cmd(&cfg, &checkpoint, first_layer, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
