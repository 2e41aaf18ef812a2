//! Sweep execution. Cells run on the worker pool, each inside its own
//! directory; a failing or panicking cell is recorded and never touches the
//! other cells' files.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use weidetect_core::config::ExperimentConfig;
use weidetect_core::report::run_to_dir;

use crate::grid::{Cell, GridSpec};
use crate::results::{load_run, pivot, write_pivots_csv, Pivot, RunRecord};

#[derive(Debug, Clone, Serialize)]
pub struct CellStatus {
    #[serde(flatten)]
    pub cell: Cell,
    pub dir: String,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub cells: Vec<CellStatus>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

impl SweepOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| !c.ok).count()
    }
}

fn run_cell(base: &ExperimentConfig, cell: &Cell, out: &Path) -> CellStatus {
    let dir_name = cell.dir_name();
    let dir = out.join(&dir_name);
    let cfg = cell.apply(base);
    let result = catch_unwind(AssertUnwindSafe(|| run_to_dir(&cfg, &dir)));
    let error = match result {
        Ok(Ok(_)) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            let _ = fs::write(
                dir.join("error.json"),
                serde_json::json!({ "error": format!("panic: {msg}") }).to_string(),
            );
            Some(format!("panic: {msg}"))
        }
    };
    CellStatus {
        cell: cell.clone(),
        dir: dir_name,
        ok: error.is_none(),
        error,
    }
}

/// Runs every cell of `grid` against `base` below `out`, then writes
/// `sweep.json`, `table_f1.csv` and `table_tcr.csv`.
pub fn run_sweep(base: &ExperimentConfig, grid: &GridSpec, out: &Path) -> Result<SweepOutcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cells = grid.cells();
    let statuses: Vec<CellStatus> = cells.par_iter().map(|c| run_cell(base, c, out)).collect();

    let records: Vec<RunRecord> = statuses
        .iter()
        .filter(|s| s.ok)
        .filter_map(|s| load_run(&out.join(&s.dir), &s.dir).ok())
        .collect();
    let outcome = SweepOutcome {
        cells: statuses,
        records,
    };
    let json = serde_json::to_string_pretty(&outcome.cells)? + "\n";
    fs::write(out.join("sweep.json"), json).context("writing sweep.json")?;
    write_pivots_csv(&out.join("table_f1.csv"), &f1_pivots(&outcome.records))?;
    write_pivots_csv(&out.join("table_tcr.csv"), &tcr_pivots(&outcome.records))?;
    Ok(outcome)
}

pub fn f1_pivots(records: &[RunRecord]) -> Vec<Pivot> {
    pivot(records, |r| r.final_f1)
}

pub fn tcr_pivots(records: &[RunRecord]) -> Vec<Pivot> {
    pivot(records, |r| r.final_tcr)
}
