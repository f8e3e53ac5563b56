//! `lightccf`: prepare splits, train, evaluate, sweep, check gradients and
//! time epochs from a single TOML config.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lightccf::dataset::InputFormat;
use lightccf::exec::{configure_threads, Execution};
use lightccf::gradcheck::GradcheckConfig;
use lightccf::synthetic::SyntheticConfig;

use commands::{PrepareArgs, Source, ValidationFailure};
use config::{resolve_data, RunConfig};

#[derive(Parser)]
#[command(name = "lightccf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for data-parallel kernels (and grid cells).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Split directory; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw interactions (or generate synthetic ones) and write a
    /// per-user train/test split.
    Prepare {
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pair-per-line")]
        format: Format,
        /// Generate data instead of reading it.
        #[arg(long, value_enum)]
        synthetic: Option<Synthetic>,
        #[arg(long, default_value_t = 0.8)]
        train_ratio: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Fake train edges to add, as a fraction of the train set.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and save checkpoint, logs and report.
    Train(RunArgs),
    /// Re-score a run directory, with per-sparsity-group metrics.
    Evaluate {
        /// Output directory of a previous `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Group cut points `LOWER,UPPER` on train interaction counts.
        #[arg(long, value_parser = parse_boundaries)]
        groups: Option<(usize, usize)>,
    },
    /// Train every temperature x weight cell of the config's grid.
    Grid(RunArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scale analytic gradients by `1 + x`; exercises the failure path.
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt: f64,
    },
    /// Per-epoch wall time for each objective in the config's bench list.
    Bench(RunArgs),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    PairPerLine,
    UserAdjacencyLine,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Synthetic {
    Tiny,
    Default,
}

fn parse_boundaries(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected LOWER,UPPER")?;
    let lo = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let hi = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    Ok((lo, hi))
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let data = match &args.data {
        Some(d) => resolve_data(Some(d), &cfg)?,
        None => {
            // Config-relative paths resolve against the config's directory
            // unless a data root is set.
            let base = args.config.parent().unwrap_or(Path::new("."));
            let d = resolve_data(None, &cfg)?;
            if d.is_relative() && std::env::var_os(config::DATA_ROOT_ENV).is_none() {
                base.join(d)
            } else {
                d
            }
        }
    };
    cfg.data = Some(std::path::absolute(&data).unwrap_or(data.clone()));
    Ok((cfg, data))
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let workers = cli.workers.unwrap_or(1);
    if let Some(n) = cli.workers {
        if n == 0 {
            anyhow::bail!("--workers must be at least 1");
        }
        if !configure_threads(n) {
            log::warn!("could not size the worker pool to {n}");
        }
    }
    match cli.command {
        Command::Prepare {
            input,
            format,
            synthetic,
            train_ratio,
            seed,
            noise,
            out,
        } => {
            let source = match (input, synthetic) {
                (Some(path), _) => Source::File {
                    path,
                    format: match format {
                        Format::PairPerLine => InputFormat::PairPerLine,
                        Format::UserAdjacencyLine => InputFormat::UserAdjacencyLine,
                    },
                },
                (None, Some(Synthetic::Tiny)) => Source::Synthetic(SyntheticConfig::tiny(seed)),
                (None, _) => Source::Synthetic(SyntheticConfig {
                    seed,
                    ..Default::default()
                }),
            };
            let args = PrepareArgs {
                source,
                train_ratio,
                seed,
                noise,
            };
            let m = commands::prepare(&args, &out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Train(args) => {
            let (cfg, data) = load_run(&args)?;
            let report = commands::train(&cfg, &data, &args.out, exec)?;
            print!("{}", report.summary_table());
        }
        Command::Evaluate { run, data, groups } => {
            let report = commands::evaluate_run(&run, data.as_deref(), groups, exec)?;
            print!("{}", report.summary_table());
        }
        Command::Grid(args) => {
            let (cfg, data) = load_run(&args)?;
            commands::grid(&cfg, &data, &args.out, workers, exec)?;
        }
        Command::Gradcheck {
            instances,
            seed,
            out,
            corrupt,
        } => {
            let gc = GradcheckConfig {
                instances,
                seed,
                corrupt,
                ..Default::default()
            };
            commands::gradcheck_cmd(&gc, out.as_deref())?;
        }
        Command::Bench(args) => {
            let (cfg, data) = load_run(&args)?;
            commands::bench(&cfg, &data, &args.out, exec)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(root) = std::env::var_os(config::DATA_ROOT_ENV) {
        log::info!("data root {}", Path::new(&root).display());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ValidationFailure>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
