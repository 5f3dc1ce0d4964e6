use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use influence_core::cache::CACHE_DIR_ENV;
use influence_core::runner::{self, RunOptions};
use influence_core::InfluenceError;

/// Influence-function fragility experiments on small dense networks.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and estimate the number of jobs; trains nothing.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every job of a config and write the reports.
    Run(RunArgs),
    /// Re-render CSV and plot tables from an existing report.json.
    Report {
        /// Directory holding report.json; defaults to the config's output_dir.
        #[arg(long, required_unless_present = "config")]
        dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
    /// Concurrent retraining jobs (0: one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

const EXIT_INVALID: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_for(err: &InfluenceError) -> ExitCode {
    match err.root() {
        InfluenceError::InvalidConfig(_) => ExitCode::from(EXIT_INVALID),
        e if e.is_numerical() => ExitCode::from(EXIT_NUMERICAL),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Validate { config } => {
            let diag = runner::validate(&config);
            println!("{diag}");
            if diag.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_INVALID)
            }
        }
        Command::Run(args) => {
            let options = RunOptions {
                cache_dir: args.cache_dir,
                workers: args.workers,
                seed_override: args.seed_override,
                output_dir: args.output_dir,
            };
            match runner::run(&args.config, &options) {
                Ok((report, summary)) => {
                    println!(
                        "wrote {} ({} points, {} failed); trainings run {} cached {}, retrainings run {} cached {}",
                        summary.output_dir.display(),
                        report.records.len(),
                        summary.failed_points,
                        summary.trainings_run,
                        summary.trainings_cached,
                        summary.retrainings_run,
                        summary.retrainings_cached
                    );
                    if summary.failed_points > 0 {
                        ExitCode::from(EXIT_NUMERICAL)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_for(&e)
                }
            }
        }
        Command::Report { dir, config } => {
            let dir = match (dir, config) {
                (Some(d), _) => d,
                (None, Some(c)) => match runner::ExperimentConfig::load(&c) {
                    Ok(cfg) => cfg.output_dir,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return exit_for(&e);
                    }
                },
                (None, None) => unreachable!("clap requires one of --dir or --config"),
            };
            match runner::rerender(&dir) {
                Ok(r) => {
                    println!("re-rendered {} records in {}", r.records.len(), dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_for(&e)
                }
            }
        }
    }
}
