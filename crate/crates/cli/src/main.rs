//! `kvevict`: runs KV-cache eviction experiments from a TOML config and writes
//! CSV reports plus a `manifest.json` into the output directory.
//!
//! Exit codes: 0 success, 1 invariant violation or failed check, 2 config,
//! parameter or output error.

mod config;
mod error;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kvevict::Policy;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "kvevict",
    version,
    about = "KV-cache eviction experiments on synthetic attention stacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`; default `kvevict-out/<experiment>`).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// First seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, short, global = true, default_value_t = 0)]
    jobs: usize,
    /// Only run these policies (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    policy: Vec<Policy>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cosine and relative error of the first decode step, full vs compressed cache.
    Fidelity,
    /// Column-row selection error against exhaustive and random subsets.
    Crs,
    /// Planted-needle construction and the two policies' outcomes on it.
    Needle,
    /// Retained-count distribution over several inputs.
    Retention,
    /// Attention vs norm-product scores under per-head vs global allocation.
    Ablation,
    /// Structural and statistical invariant checks.
    Selftest,
}

impl Command {
    fn experiment(&self) -> Experiment {
        match self {
            Command::Fidelity => Experiment::Fidelity,
            Command::Crs => Experiment::Crs,
            Command::Needle => Experiment::Needle,
            Command::Retention => Experiment::Retention,
            Command::Ablation => Experiment::Ablation,
            Command::Selftest => Experiment::Selftest,
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let experiment = cli.command.experiment();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if !cli.policy.is_empty() {
        cfg.filter_policies(&cli.policy)?;
    }
    cfg.validate_for(experiment)?;
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("kvevict-out").join(experiment.name()));
    cfg.output_dir = Some(dir.clone());
    cfg.experiment = Some(experiment);

    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", cli.jobs)))?;

    log::info!("running {} into {}", experiment.name(), dir.display());
    let report = run::run(experiment, &cfg)?;
    let written = report.outputs.commit(&dir, experiment, &report.summary, &cfg)?;
    for line in &report.lines {
        println!("{line}");
    }
    for path in &written {
        log::info!("wrote {}", path.display());
    }
    match report.failure {
        Some(msg) => Err(CliError::Invariant(msg)),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // selftest drives edge cases on purpose; their warnings are expected
    let level = if matches!(cli.command, Command::Selftest) {
        "error"
    } else {
        "warn"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kvevict: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
