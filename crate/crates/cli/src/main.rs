use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prlc_core::harness::checks::{run_checks, OracleHooks};
use prlc_core::harness::experiment::{format_report, load_summaries, run_single, run_sweep, summary_json, write_outputs, ExperimentConfig};
use prlc_core::trainer::Selector;
use prlc_core::Error;

const EXIT_FAILED: u8 = 1;
const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "prlc", version, about = "Posterior regularization with learnable constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write its metrics CSV and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        selector: Option<String>,
    },
    /// Train every selector and seed listed in the config's sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Restrict the sweep to one seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict the sweep to one selector.
        #[arg(long)]
        selector: Option<String>,
    },
    /// Run the verification suite.
    CheckOracles {
        /// Check ids to run (all when absent).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        /// Directory for check-report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        alpha_override: Option<f64>,
        #[arg(long, hide = true)]
        corrupt_maxent_sign: bool,
    },
    /// Tabulate the summaries found in a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::InvalidConfig(_) | Error::MetricMismatch { .. } | Error::Json(_) | Error::InvalidSpace(_))
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if is_config_error(&e) { EXIT_INVALID } else { EXIT_FAILED })
}

fn load(config: &Path, seed: Option<u64>, out: Option<PathBuf>, selector: Option<String>) -> Result<(ExperimentConfig, Option<Selector>), Error> {
    let mut cfg = ExperimentConfig::load(config)?;
    let selector = selector.as_deref().map(Selector::parse).transpose()?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(dir) = out {
        cfg.out_dir = Some(dir);
    }
    cfg.validate()?;
    Ok((cfg, selector))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { config, seed, out, selector } => {
            let (cfg, selector) = match load(&config, seed, out, selector) {
                Ok(v) => v,
                Err(e) => return fail(e),
            };
            let run = run_single(&cfg, selector.unwrap_or(cfg.train.selector), cfg.train.seed).and_then(|r| {
                if let Some(dir) = &cfg.out_dir {
                    write_outputs(dir, std::slice::from_ref(&r))?;
                }
                Ok(r)
            });
            match run.and_then(|r| summary_json(&r.summary)) {
                Ok(json) => {
                    println!("{json}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Sweep { config, seed, out, selector } => {
            let (mut cfg, selector) = match load(&config, None, out, selector) {
                Ok(v) => v,
                Err(e) => return fail(e),
            };
            if let Some(s) = selector {
                cfg.sweep.selectors = vec![s];
            }
            if let Some(s) = seed {
                cfg.sweep.seeds = vec![s];
            }
            match run_sweep(&cfg) {
                Ok(runs) => {
                    let summaries: Vec<_> = runs.into_iter().map(|r| r.summary).collect();
                    print!("{}", format_report(&summaries));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::CheckOracles { only, out, alpha_override, corrupt_maxent_sign } => {
            let hooks = OracleHooks { alpha_override, corrupt_maxent_sign };
            let report = match run_checks(&only, &hooks) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            for r in &report.results {
                println!("{}", r.line());
            }
            if let Some(dir) = out {
                let written = std::fs::create_dir_all(&dir)
                    .map_err(Error::from)
                    .and_then(|_| Ok(serde_json::to_string_pretty(&report)?))
                    .and_then(|json| Ok(std::fs::write(dir.join("check-report.json"), json)?));
                if let Err(e) = written {
                    return fail(e);
                }
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILED)
            }
        }
        Command::Report { out } => match load_summaries(&out) {
            Ok(s) if s.is_empty() => {
                eprintln!("error: no summaries in {}", out.display());
                ExitCode::from(EXIT_FAILED)
            }
            Ok(s) => {
                print!("{}", format_report(&s));
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
