//! Reading finished run directories back and rendering result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use serde_json::Value;

use weidetect_core::report::{read_rounds_csv, RoundRow, RunPaths, ROUNDS_HEADER};

/// One completed run, as found on disk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub cell: String,
    pub aggregator: String,
    pub attack: String,
    pub poison_ratio: f64,
    pub aux_volume: f64,
    pub target_labels: Vec<usize>,
    pub best_f1: Option<f64>,
    pub final_f1: Option<f64>,
    pub best_tcr: Option<f64>,
    pub final_tcr: Option<f64>,
    pub rows: Vec<RoundRow>,
}

fn best(values: impl Iterator<Item = f64>) -> Option<f64> {
    values.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Loads a run directory. A run counts as completed once `summary.json`
/// exists; partial runs are reported as errors.
pub fn load_run(dir: &Path, cell: &str) -> Result<RunRecord> {
    let paths = RunPaths::new(dir);
    if !paths.summary().exists() {
        let reason = fs::read_to_string(paths.error())
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok())
            .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_owned))
            .unwrap_or_else(|| "summary.json missing".into());
        return Err(anyhow!("{}: incomplete run ({reason})", dir.display()));
    }
    let rows = read_rounds_csv(&paths.rounds())
        .with_context(|| format!("{}", paths.rounds().display()))?;
    let manifest_text = fs::read_to_string(paths.manifest())
        .with_context(|| format!("{}", paths.manifest().display()))?;
    let manifest: Value = serde_json::from_str(&manifest_text)
        .with_context(|| format!("{}", paths.manifest().display()))?;
    let config = manifest
        .get("config")
        .ok_or_else(|| anyhow!("{}: no config", paths.manifest().display()))?;
    let str_at = |ptr: &str| config.pointer(ptr).and_then(Value::as_str).unwrap_or("?").to_owned();
    let aux_volume = config
        .pointer("/defense/aux_volume")
        .and_then(Value::as_f64)
        .unwrap_or(f64::NAN);
    let target_labels = config
        .pointer("/attack/target_labels")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_u64).map(|v| v as usize).collect())
        .unwrap_or_default();
    let poison_ratio = config
        .pointer("/attack/poison_ratio")
        .and_then(Value::as_f64)
        .unwrap_or(f64::NAN);

    Ok(RunRecord {
        cell: cell.to_owned(),
        aggregator: str_at("/defense/kind"),
        attack: str_at("/attack/kind"),
        poison_ratio,
        aux_volume,
        target_labels,
        best_f1: best(rows.iter().map(|r| r.global_f1)),
        final_f1: rows.last().map(|r| r.global_f1),
        best_tcr: best(rows.iter().filter_map(|r| r.tcr)),
        final_tcr: rows.last().and_then(|r| r.tcr),
        rows,
    })
}

/// Run directories below `root`: `root` itself if it holds a run, otherwise
/// its immediate subdirectories that do, in name order.
pub fn discover(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(anyhow!("{} is not a directory", root.display()));
    }
    if RunPaths::new(root).manifest().exists() || RunPaths::new(root).rounds().exists() {
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| ".".into());
        return Ok(vec![(name, root.to_path_buf())]);
    }
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .filter(|p| {
            let rp = RunPaths::new(p);
            rp.manifest().exists() || rp.rounds().exists() || rp.error().exists()
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Left-aligned first column, right-aligned others, two-space gutters.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        for (i, cell) in cells.iter().enumerate().take(cols) {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[i]);
            } else {
                let _ = write!(out, "{cell:>w$}", w = widths[i]);
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for row in rows {
        line(&mut out, row);
    }
    out
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn targets_label(t: &[usize]) -> String {
    let parts: Vec<String> = t.iter().map(|c| c.to_string()).collect();
    parts.join("+")
}

/// One row per run: identity columns plus best / final metrics.
pub fn runs_table(records: &[RunRecord]) -> String {
    let header: Vec<String> = [
        "cell", "aggregator", "attack", "ratio", "targets", "aux_vol", "rounds", "final_f1",
        "best_f1", "final_tcr", "best_tcr",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.cell.clone(),
                r.aggregator.clone(),
                r.attack.clone(),
                r.poison_ratio.to_string(),
                targets_label(&r.target_labels),
                r.aux_volume.to_string(),
                r.rows.len().to_string(),
                fmt_opt(r.final_f1),
                fmt_opt(r.best_f1),
                fmt_opt(r.final_tcr),
                fmt_opt(r.best_tcr),
            ]
        })
        .collect();
    render_table(&header, &rows)
}

/// A ratio-by-defense table for one (attack, targets, aux volume) slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Pivot {
    pub attack: String,
    pub targets: String,
    pub aux_volume: f64,
    pub defenses: Vec<String>,
    /// Poison ratio and one value per defense column.
    pub rows: Vec<(f64, Vec<Option<f64>>)>,
}

/// Groups records into pivots; `metric` picks the cell value.
pub fn pivot(records: &[RunRecord], metric: impl Fn(&RunRecord) -> Option<f64>) -> Vec<Pivot> {
    let mut groups: BTreeMap<(String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.attack.clone(), targets_label(&r.target_labels), r.aux_volume.to_string());
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|group| {
            let mut defenses: Vec<String> = Vec::new();
            let mut ratios: Vec<f64> = Vec::new();
            for r in &group {
                if !defenses.contains(&r.aggregator) {
                    defenses.push(r.aggregator.clone());
                }
                if !ratios.iter().any(|x| x.to_bits() == r.poison_ratio.to_bits()) {
                    ratios.push(r.poison_ratio);
                }
            }
            ratios.sort_by(f64::total_cmp);
            let rows = ratios
                .iter()
                .map(|&ratio| {
                    let vals = defenses
                        .iter()
                        .map(|d| {
                            group
                                .iter()
                                .find(|r| &r.aggregator == d && r.poison_ratio.to_bits() == ratio.to_bits())
                                .and_then(|r| metric(r))
                        })
                        .collect();
                    (ratio, vals)
                })
                .collect();
            Pivot {
                attack: group[0].attack.clone(),
                targets: targets_label(&group[0].target_labels),
                aux_volume: group[0].aux_volume,
                defenses,
                rows,
            }
        })
        .collect()
}

impl Pivot {
    pub fn title(&self) -> String {
        format!(
            "attack={} targets={} aux_volume={}",
            self.attack, self.targets, self.aux_volume
        )
    }

    pub fn render(&self) -> String {
        let mut header = vec!["poison_ratio".to_string()];
        header.extend(self.defenses.iter().cloned());
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(ratio, vals)| {
                let mut row = vec![ratio.to_string()];
                row.extend(vals.iter().map(|v| fmt_opt(*v)));
                row
            })
            .collect();
        render_table(&header, &rows)
    }

    /// CSV lines with the slice identity repeated on every row.
    pub fn csv_lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|(ratio, vals)| {
                let mut cells = vec![
                    self.attack.clone(),
                    self.targets.clone(),
                    self.aux_volume.to_string(),
                    ratio.to_string(),
                ];
                cells.extend(vals.iter().map(|v| v.map(|v| format!("{v:.6}")).unwrap_or_default()));
                cells.join(",")
            })
            .collect()
    }
}

/// Writes a pivot set as CSV; columns are the union of defenses, in order.
pub fn write_pivots_csv(path: &Path, pivots: &[Pivot]) -> Result<()> {
    let mut defenses: Vec<String> = Vec::new();
    for p in pivots {
        for d in &p.defenses {
            if !defenses.contains(d) {
                defenses.push(d.clone());
            }
        }
    }
    let mut out = format!("attack,targets,aux_volume,poison_ratio,{}\n", defenses.join(","));
    for p in pivots {
        let aligned = Pivot {
            rows: p
                .rows
                .iter()
                .map(|(ratio, vals)| {
                    let vals = defenses
                        .iter()
                        .map(|d| p.defenses.iter().position(|x| x == d).and_then(|i| vals[i]))
                        .collect();
                    (*ratio, vals)
                })
                .collect(),
            defenses: defenses.clone(),
            ..p.clone()
        };
        for line in aligned.csv_lines() {
            out.push_str(&line);
            out.push('\n');
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Plot-ready long format: one line per round per run.
pub fn write_long_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = format!("cell,{ROUNDS_HEADER}\n");
    for r in records {
        for row in &r.rows {
            let tcr = row.tcr.map(|t| format!("{t:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{},{:.3},{}",
                r.cell,
                row.round,
                row.aggregator,
                row.attack,
                row.poison_ratio,
                row.global_f1,
                tcr,
                row.agg_time_s,
                row.selected_count
            );
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
