mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Mask-based MVDR beamforming with attention-weighted covariance estimation.
#[derive(Debug, Parser)]
#[command(name = "tvbf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set training.lr=1e-4`.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render simulated scenes and their manifests.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Render this many scenes of one split instead of the full dataset.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "train", value_parser = ["train", "dev", "eval"])]
        split: String,
        #[arg(long, default_value = "line", value_parser = ["line", "fixed", "circle"])]
        trajectory: String,
    },
    /// Train the speech and noise attention networks.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Training manifest, overriding `training.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        dev_manifest: Option<PathBuf>,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Enhance utterances and write the reference-channel outputs as WAV.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "att")]
        system: String,
        /// Trained networks, needed by the attention system.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Simulated utterances, enhanced with oracle masks.
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        manifest: Option<PathBuf>,
        /// Multichannel WAV to enhance with externally estimated masks.
        #[arg(long, requires = "masks")]
        input: Option<PathBuf>,
        /// Speech mask file for `--input`; the noise mask is its complement.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Reference channel for `--input`.
        #[arg(long, default_value_t = 0)]
        reference: usize,
    },
    /// Compare systems on a manifest and write a CSV report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated systems, e.g. `tiv,onl,blk,att`.
        #[arg(long)]
        systems: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        smooth: Option<usize>,
    },
    /// Per-frame beam patterns and attention heatmaps of one scene.
    Beampattern {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "att")]
        system: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene source; a circle scene is rendered when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Utterance index within the manifest.
        #[arg(long, default_value_t = 0)]
        utterance: usize,
    },
    /// Finite-difference checks of every differentiable op and the full chain.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Directory for the resolved configuration snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
