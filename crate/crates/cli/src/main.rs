use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctrl_cli::commands::{self, Verdict};
use ctrl_cli::{exit, parse_seed_range, CliError};

/// Contrastive representation learning for low-rank MDPs.
#[derive(Parser)]
#[command(name = "ctrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Online exploration with an optimism bonus.
    Online {
        config: PathBuf,
        /// Run each seed of `a..b` (or `a..=b`) into `output_dir/seed-<k>`.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Offline learning with a pessimism penalty.
    Offline {
        config: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Density grid of a trained continuous-state model at one (s, a).
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated coordinates, e.g. `0.25,0.25`.
        #[arg(long)]
        state: String,
        #[arg(long)]
        action: String,
        #[arg(long, default_value = "100x100")]
        resolution: String,
        /// Seed of the Monte-Carlo normalizer.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// NCE-versus-MLE sweep on a synthetic conditional family.
    Consistency { config: PathBuf },
    /// Roll out a behavior policy into a dataset file.
    GenDataset { config: PathBuf },
    /// Finite-difference checks of every differentiable loss.
    CheckGradients {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seeds = |s: &Option<String>| s.as_deref().map(parse_seed_range).transpose();
    match cli.command {
        Command::Online { config, seeds: s } => commands::online(&config, seeds(&s)?.as_deref()),
        Command::Offline { config, seeds: s } => commands::offline(&config, seeds(&s)?.as_deref()),
        Command::Heatmap { model, state, action, resolution, seed, out } => {
            commands::heatmap(&model, &state, &action, commands::parse_resolution(&resolution)?, seed, &out)
        }
        Command::Consistency { config } => match commands::consistency(&config)? {
            Verdict::Pass | Verdict::InconsistencyWitnessed => Ok(()),
            Verdict::Fail => Err(CliError::CheckFailed("consistency sweep missed its threshold".into())),
        },
        Command::GenDataset { config } => commands::gen_dataset(&config).map(|_| ()),
        Command::CheckGradients { instances, seed } => commands::check_gradients(instances, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
