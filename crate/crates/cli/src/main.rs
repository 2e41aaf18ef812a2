use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use weidetect_cli::grid::GridSpec;
use weidetect_cli::results::{discover, load_run, runs_table, write_long_csv, RunRecord};
use weidetect_cli::sweep::{f1_pivots, run_sweep, tcr_pivots};
use weidetect_core::config::ExperimentConfig;
use weidetect_core::report::run_to_dir;
use weidetect_core::Error;

#[derive(Parser)]
#[command(name = "weidetect", version, about = "Federated poisoning experiments with Weibull-based client filtering")]
struct Cli {
    /// Worker threads for client training and sweeps (default: all cores).
    #[arg(long, global = true, env = "WEIDETECT_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the master seed from the config.
        #[arg(long = "seed-override", alias = "seed")]
        seed: Option<u64>,
    },
    /// Run a config over a grid of overrides, one directory per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a run or sweep directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seeds.master = s;
    }
    Ok(cfg)
}

/// Prints config violations one per line; other errors as a chain.
fn print_error(err: &anyhow::Error) {
    if let Some(Error::Config(list)) = err.downcast_ref::<Error>() {
        eprintln!("invalid configuration:");
        for v in list {
            eprintln!("  {v}");
        }
    } else {
        eprintln!("error: {err:#}");
    }
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    cfg.validate()?;
    let summary = run_to_dir(&cfg, out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_sweep(config: &Path, grid: &Path, out: &Path) -> Result<bool> {
    let base = load_config(config, None)?;
    let grid = GridSpec::from_file(grid)?;
    let mut problems = Vec::new();
    for cell in grid.cells() {
        for v in cell.apply(&base).violations() {
            problems.push(format!("{}: {v}", cell.dir_name()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems).into());
    }
    let outcome = run_sweep(&base, &grid, out)?;
    for c in outcome.cells.iter().filter(|c| !c.ok) {
        eprintln!("cell {} failed: {}", c.dir, c.error.as_deref().unwrap_or("?"));
    }
    print_tables(&outcome.records);
    println!(
        "{} of {} cells completed",
        outcome.cells.len() - outcome.failed(),
        outcome.cells.len()
    );
    Ok(outcome.failed() == 0)
}

fn print_tables(records: &[RunRecord]) {
    println!("{}", runs_table(records));
    for (name, pivots) in [("final macro-F1", f1_pivots(records)), ("final TCR", tcr_pivots(records))] {
        for p in pivots {
            println!("{name}: {}", p.title());
            println!("{}", p.render());
        }
    }
}

fn cmd_report(out: &Path) -> Result<bool> {
    let runs = discover(out)?;
    let mut records = Vec::new();
    let mut problems = 0;
    for (name, dir) in &runs {
        match load_run(dir, name) {
            Ok(r) => records.push(r),
            Err(e) => {
                problems += 1;
                eprintln!("skipped {name}: {e:#}");
            }
        }
    }
    if records.is_empty() {
        anyhow::bail!("no completed runs under {}", out.display());
    }
    print_tables(&records);
    let long = out.join("long.csv");
    write_long_csv(&long, &records).with_context(|| format!("writing {}", long.display()))?;
    println!("wrote {}", long.display());
    Ok(problems == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Run { config, out, seed } => cmd_run(config, out, *seed).map(|_| true),
        Command::Sweep { config, grid, out } => cmd_sweep(config, grid, out),
        Command::Report { out } => cmd_report(out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            print_error(&e);
            ExitCode::from(2)
        }
    }
}
