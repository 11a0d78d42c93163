use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tscl::config::ExperimentConfig;
use tscl::data::{DatasetKind, SplitSpec};
use tscl::runner::{self, RunOptions};
use tscl::Result;

#[derive(Parser)]
#[command(name = "tscl", version, about = "Contrastive learning experiments for time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split, normalize and persist a raw CSV.
    Prepare {
        dataset: PathBuf,
        #[arg(long, default_value = "custom")]
        kind: DatasetKind,
        #[arg(long, default_value = "prepared")]
        out: PathBuf,
        /// Average sub-hourly rows into hourly ones first.
        #[arg(long)]
        hourly: bool,
    },
    /// Run the method × horizon × seed matrix of an experiment config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "cpu")]
        device: String,
        #[arg(long)]
        raw_scale_metrics: bool,
        /// Number of worker processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Validate the config and list jobs without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Merge finished runs into one results table.
    Table {
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        out: PathBuf,
    },
    /// Effective receptive field maps for a saved model.
    Erf {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value = "erf")]
        out: PathBuf,
    },
    #[command(hide = true)]
    Worker {
        config: PathBuf,
        #[arg(long)]
        job: usize,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        seeds: Vec<u64>,
        #[arg(long)]
        raw_scale_metrics: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Prepare { dataset, kind, out, hourly } => {
            for f in runner::prepare_command(&dataset, kind, &out, &SplitSpec::default(), hourly)? {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Cmd::Run { config, seed, device, raw_scale_metrics, parallel, dry_run } => {
            if device != "cpu" {
                return Err(tscl::Error::Config { field: "--device".into(), message: format!("unsupported device `{device}`") });
            }
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                seed,
                raw_scale_metrics,
                parallel,
                worker_exe: std::env::current_exe().ok(),
                dry_run,
            };
            if dry_run {
                let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
                for j in runner::jobs(&cfg, &seeds) {
                    println!("{} h={} seed={}", cfg.methods[j.method].label(), j.horizon, j.seed);
                }
            }
            let out = runner::run(&cfg, Some(&config), &opts)?;
            if !dry_run {
                print!("{}", out.table.render_text());
                println!("results in {}", out.run_dir.display());
            }
            Ok(if out.diverged { 3 } else { 0 })
        }
        Cmd::Table { runs, out } => {
            let table = runner::table_command(&runs, &out)?;
            print!("{}", table.render_text());
            Ok(0)
        }
        Cmd::Erf { checkpoint, config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            for f in runner::erf_command(&checkpoint, &cfg, &out)? {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Cmd::Worker { config, job, run_dir, seeds, raw_scale_metrics } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cell = runner::run_worker(&cfg, &run_dir, &seeds, job, raw_scale_metrics || cfg.raw_scale_metrics)?;
            println!("{} h={} seed={} mse={:.6} mae={:.6}", cell.method, cell.horizon, cell.seed, cell.mse, cell.mae);
            Ok(0)
        }
    }
}
