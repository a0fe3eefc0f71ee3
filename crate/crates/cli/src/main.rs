//! `dfl`: run decentralized federated learning experiments from config
//! files and plot their summaries.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use dfl_core::config::ExperimentConfig;
use dfl_core::runner::{self, RunOptions};
use dfl_core::{plot, Error};

#[derive(Parser)]
#[command(name = "dfl", version, about = "Decentralized federated learning simulator")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write CSV/JSON outputs
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the outputs of an earlier run in the output directory
        #[arg(long)]
        force: bool,
    },
    /// Render metric-vs-PNR SVG charts from summary.json files
    Plot {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config and print it with every default filled in
    Validate { config: PathBuf },
}

fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    match ExperimentConfig::load(path) {
        Ok(cfg) => Ok(cfg),
        Err(Error::Config(problems)) => {
            for p in &problems {
                eprintln!("error: {p}");
            }
            bail!("{} problem(s) in {}", problems.len(), path.display())
        }
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, out, force } => {
            let cfg = load(&config)?;
            let Some(out_dir) = out.or_else(|| cfg.output_dir.clone()) else {
                bail!("no output directory: pass --out or set output_dir in the config");
            };
            let base_dir = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let summary = runner::run(
                &cfg,
                &RunOptions {
                    out_dir: out_dir.clone(),
                    force,
                    base_dir,
                },
            )
            .with_context(|| format!("running {}", config.display()))?;
            for (name, m) in &summary.metrics {
                println!("{name:>10}  {:.4} ± {:.4}  (n = {})", m.mean, m.std, m.n);
            }
            println!("wrote {}", out_dir.display());
        }
        Command::Plot { summaries, out } => {
            for path in plot::plot_files(&summaries, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
