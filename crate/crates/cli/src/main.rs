use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand, ValueEnum};
use gridsched::scenario::{emit_results, emit_results_to_path, preset_wwg, run_scenario, run_sweep, SweepConfig};
use gridsched::stats::write_report;
use gridsched::{Error, ScenarioConfig};

#[derive(Parser)]
#[command(name = "gridsched", version, about = "Discrete-event grid scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Wwg,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its results table.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Supplies resources (and users, without a config) from a built-in testbed.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Results CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write recorded statistics as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every cell of a deadline x budget (x user count) grid in parallel.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Supplies resources from a built-in testbed and the default grid.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(config: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = match (config, preset) {
        (Some(path), preset) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg = ScenarioConfig::from_json(&text)?;
            if let Some(Preset::Wwg) = preset {
                if cfg.resources.is_empty() {
                    cfg.resources = preset_wwg().resources;
                }
                cfg.default_baud_rate = cfg.default_baud_rate.or(preset_wwg().default_baud_rate);
            }
            cfg
        }
        (None, Some(Preset::Wwg)) => preset_wwg(),
        (None, None) => anyhow::bail!(Error::Config("either --config or --preset is required".into())),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, preset, out, report, seed } => {
            let cfg = load(config.as_deref(), preset, seed)?;
            if cfg.sweep.is_some() {
                anyhow::bail!(Error::Config("sweep: use the sweep command for configs with a sweep block".into()));
            }
            let outcome = run_scenario(&cfg)?;
            if let Some(path) = report {
                write_report(&outcome.stats, &[], &path)?;
            }
            let rows = outcome.rows;
            match out {
                Some(path) => emit_results_to_path(&rows, &[], &path)?,
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    emit_results(&rows, &[], &mut lock)?;
                    lock.flush()?;
                }
            }
        }
        Command::Sweep { config, preset, out, seed } => {
            let mut cfg = load(config.as_deref(), preset, seed)?;
            if cfg.sweep.is_none() && preset.is_some() {
                cfg.sweep = Some(SweepConfig::wwg_grid());
            }
            let result = run_sweep(&cfg)?;
            emit_results_to_path(&result.rows, &result.failures, &out)?;
            for f in &result.failures {
                eprintln!(
                    "cell users={} deadline={} budget={} failed: {}",
                    f.cell.user_count, f.cell.deadline, f.cell.budget, f.message
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(1),
                _ if e.downcast_ref::<std::io::Error>().is_some() => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
