//! `mtd`: simulate MTD measurements, reduce them to autocorrelations, and
//! recover the target with or without a prior.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::TargetSource;
use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Image recovery from multi-target detection measurements by
/// autocorrelation analysis.
///
/// Every command resolves an experiment configuration (defaults, then
/// `--config`, then `--set` overrides) and writes it as `config.toml` next to
/// its outputs. Set `MTD_THREADS` to fix the worker thread count.
///
/// Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
/// 4 I/O or file format error.
#[derive(Parser, Debug)]
#[command(name = "mtd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set recovery.learning_rate=5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`)
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::resolve(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a target set from an IDX image file or the pattern mixture
    Prep {
        #[command(flatten)]
        common: Common,
        /// IDX3 image file (e.g. MNIST); cropped and resized per `[dataset]`
        #[arg(long, conflicts_with = "pattern_mixture")]
        idx: Option<PathBuf>,
        /// Sample targets from the built-in three-pattern mixture instead
        #[arg(long)]
        pattern_mixture: bool,
        /// Pixel variance of the pattern mixture samples
        #[arg(long, default_value_t = 1e-4)]
        variance: f64,
        /// Number of targets
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Plant noisy copies of a target in MTDMEAS1 measurement files
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Target image: raster or target-set JSON
        #[arg(long)]
        target: PathBuf,
        /// Entry of a target-set JSON
        #[arg(long)]
        index: Option<usize>,
    },
    /// Compute measurement autocorrelations up to third order (MTDAC1)
    Moments {
        #[command(flatten)]
        common: Common,
        /// Measurement files or simulation manifests
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Shift range L (default: the configured measured copy side)
        #[arg(short = 'L', long = "shifts")]
        shifts: Option<usize>,
        /// Output file (default: <out>/moments.mtdac)
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Recover the target from an MTDAC1 moments file
    Recover {
        #[command(flatten)]
        common: Common,
        /// Moments file; its JSON sidecar supplies gamma and sigma2
        #[arg(long)]
        moments: PathBuf,
        /// Ground truth for the relative error E
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Simulation manifest, used for the noisy row of the panel
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Error-versus-SNR sweep over a target set, with and without the prior
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Target-set JSON
        #[arg(long)]
        targets: PathBuf,
    },
    /// Render a sweep CSV as an error-versus-SNR SVG chart
    Plot {
        /// Sweep CSV as written by `sweep`
        csv: PathBuf,
        /// Output SVG
        #[arg(short, long, default_value = "error_vs_snr.svg")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prep {
            common,
            idx,
            pattern_mixture,
            variance,
            count,
        } => {
            let source = match (idx, pattern_mixture) {
                (Some(path), _) => TargetSource::Idx(path),
                (None, true) => TargetSource::PatternMixture { variance },
                (None, false) => {
                    return Err(CliError::Config(
                        "prep needs --idx or --pattern-mixture".into(),
                    ))
                }
            };
            commands::prep(&common.resolve()?, source, count)
        }
        Command::Simulate {
            common,
            target,
            index,
        } => commands::simulate(&common.resolve()?, &target, index),
        Command::Moments {
            common,
            inputs,
            shifts,
            file,
        } => commands::moments(&common.resolve()?, &inputs, shifts, file.as_deref()),
        Command::Recover {
            common,
            moments,
            truth,
            manifest,
        } => commands::recover(
            &common.resolve()?,
            &moments,
            truth.as_deref(),
            manifest.as_deref(),
        ),
        Command::Sweep { common, targets } => commands::sweep(&common.resolve()?, &targets),
        Command::Plot { csv, out } => commands::plot(&csv, &out),
    }
}

fn main() -> ExitCode {
    if let Some(threads) = std::env::var("MTD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("mtd: cannot size thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mtd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
