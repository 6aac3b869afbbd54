//! `explorer`: runs the exploratory portfolio experiments from TOML configs.

mod config;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, Experiment, ExperimentConfig, PRESETS};
use experiments::RunError;
use output::{Manifest, OutputDir};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "explorer", version, about = "Entropy-regularized exploratory portfolio experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or preset name.
    Run {
        config: String,
        /// Output directory (default: the config's `out`, else `out/<experiment>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for path simulation.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List experiments and built-in presets.
    List,
    /// Validate a config without running it.
    Check { config: String },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            println!("experiments:");
            for e in Experiment::ALL {
                println!("  {:<22} {}", e.tag(), e.describe());
            }
            println!("presets:");
            for (name, _) in PRESETS {
                println!("  {name}");
            }
            ExitCode::SUCCESS
        }
        Command::Check { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                println!("{config}: ok ({})", cfg.experiment.tag());
                ExitCode::SUCCESS
            }
            Err(e) => config_failure(e),
        },
        Command::Run { config, out, seed, threads } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return config_failure(e),
            };
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(k) = threads {
                if k == 0 {
                    return config_failure(ConfigError::Invalid("--threads must be at least 1".into()));
                }
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
                    eprintln!("error: cannot set up thread pool: {e}");
                    return ExitCode::from(EXIT_FAILURE);
                }
            }
            let dir = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.tag()));
            match run(&cfg, dir) {
                Ok(dir) => {
                    println!("wrote {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(match e {
                        RunError::Config(_) => EXIT_CONFIG,
                        RunError::Diverged { .. } => EXIT_DIVERGED,
                        _ => EXIT_FAILURE,
                    })
                }
            }
        }
    }
}

fn config_failure(e: ConfigError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn run(cfg: &ExperimentConfig, dir: PathBuf) -> Result<PathBuf, RunError> {
    let mut out = OutputDir::create(&dir)
        .map_err(|e| ConfigError::Invalid(format!("cannot create output directory {}: {e}", dir.display())))?;
    let summary = experiments::run(cfg, &mut out)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("EXPLORER_VERSION"),
        experiment: cfg.experiment.tag(),
        seeds: &cfg.seeds,
        config: &cfg.echo(),
        files: out.files(),
        summary,
    };
    output::write_manifest(out.path(), &manifest)?;
    Ok(dir)
}
