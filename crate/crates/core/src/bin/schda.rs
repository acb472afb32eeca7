//! Command-line driver: run a data assimilation experiment or regenerate
//! plots from a finished run directory.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use schda_core::config::{FilterMode, RunConfig};
use schda_core::experiment::run_experiment;
use schda_core::plot::render_run_dir;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "schda",
    about = "Particle-filter data assimilation for the stochastic Camassa-Holm equation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write all artifacts into an output directory.
    Run {
        /// TOML config file; omitted keys fall back to the full-domain
        /// experiment defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Filter mode, overriding the config file.
        #[arg(long)]
        mode: Option<FilterModeArg>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Seed override; the SCHDA_SEED environment variable takes
        /// precedence over both this flag and the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate the SVG plots from a run directory's CSV tables.
    Plot {
        /// A directory previously produced by `schda run`.
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FilterModeArg {
    Bootstrap,
    Tempered,
    Nudged,
}

impl From<FilterModeArg> for FilterMode {
    fn from(value: FilterModeArg) -> Self {
        match value {
            FilterModeArg::Bootstrap => FilterMode::Bootstrap,
            FilterModeArg::Tempered => FilterMode::Tempered,
            FilterModeArg::Nudged => FilterMode::Nudged,
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            mode,
            out,
            seed,
        } => {
            let mut run_config = match &config {
                Some(path) => RunConfig::load(path)
                    .with_context(|| format!("loading config {}", path.display()))?,
                None => RunConfig::default(),
            };
            if let Some(mode) = mode {
                run_config.mode = mode.into();
            }
            if let Some(seed) = seed {
                run_config.seed = seed;
            }
            if let Ok(env_seed) = std::env::var("SCHDA_SEED") {
                run_config.seed = env_seed
                    .parse()
                    .context("SCHDA_SEED must be an unsigned integer")?;
            }
            let summary = run_experiment(&run_config, &out)?;
            let last = summary.stats.last().expect("at least the initial row");
            println!(
                "completed {} assimilation steps (mode {}) -> {}",
                summary.traces.len(),
                run_config.mode,
                out.display()
            );
            println!(
                "final stats: emre={:.4} rb={:.4} res={:.4}",
                last.emre, last.rb, last.res
            );
            Ok(())
        }
        Command::Plot { input } => {
            render_run_dir(&input)
                .with_context(|| format!("rendering plots in {}", input.display()))?;
            println!("plots written under {}", input.display());
            Ok(())
        }
    }
}
