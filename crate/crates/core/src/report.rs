//! Run artifacts on disk.
//!
//! A run directory holds:
//! - `rounds.csv`: one row per round, fixed header [`ROUNDS_HEADER`]
//! - `manifest.json`: resolved config, seeds, dataset fingerprint, version
//! - `summary.json`: best and final F1 / TCR
//! - `partition.json`: client to row-index lists
//! - `defense.jsonl`: per-round validation scores, fit and selection
//! - `poison.jsonl`: per-round poisoned indices of each adversary
//! - `params.bin` (optional): raw parameter vectors
//! - `error.json`: written only when the run aborts

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TimingMode};
use crate::data::DatasetSummary;
use crate::orchestrator::{summarize, ExperimentSummary, Federation, RoundParams, RoundReport};
use crate::{Error, Result};

pub const ROUNDS_HEADER: &str =
    "round,aggregator,attack,poison_ratio,global_f1,tcr,agg_time_s,selected_count";

/// Magic bytes opening every record of `params.bin`.
pub const PARAM_MAGIC: [u8; 4] = *b"WDPV";
/// Client id written for the aggregated global model.
pub const GLOBAL_ID: u64 = u64::MAX;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One parsed line of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub aggregator: String,
    pub attack: String,
    pub poison_ratio: f64,
    pub global_f1: f64,
    pub tcr: Option<f64>,
    pub agg_time_s: f64,
    pub selected_count: usize,
}

/// Formats one report as a `rounds.csv` line (without newline).
pub fn format_round(report: &RoundReport, timing: TimingMode) -> String {
    let time = match timing {
        TimingMode::Measured => report.agg_time_s,
        TimingMode::Suppressed => 0.0,
    };
    let tcr = report.tcr.map(|t| format!("{t:.6}")).unwrap_or_default();
    format!(
        "{},{},{},{},{:.6},{},{:.3},{}",
        report.round,
        report.aggregator,
        report.attack,
        report.poison_ratio,
        report.global_f1,
        tcr,
        time,
        report.selected_ids.len()
    )
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != ROUNDS_HEADER {
        return Err(Error::CsvRow {
            row: 0,
            message: format!("{}: unexpected header `{}`", path.display(), header.join(",")),
        });
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub version: &'static str,
    pub master_seed: u64,
    pub config: &'a ExperimentConfig,
    pub dataset: &'a DatasetSummary,
    pub test_rows: usize,
    pub server_rows: usize,
    pub aux_rows: usize,
    pub client_sizes: Vec<usize>,
    pub adversary_ids: &'a [usize],
    pub flip_map: &'a [(usize, usize)],
    pub warnings: &'a [String],
}

impl<'a> Manifest<'a> {
    pub fn new(fed: &'a Federation) -> Self {
        Self {
            version: VERSION,
            master_seed: fed.config.seeds.master,
            config: &fed.config,
            dataset: &fed.dataset,
            test_rows: fed.test.len(),
            server_rows: fed.server.as_ref().map_or(0, |s| s.len()),
            aux_rows: fed.aux.as_ref().map_or(0, |a| a.len()),
            client_sizes: fed.partition.sizes(),
            adversary_ids: &fed.adversary_ids,
            flip_map: &fed.attack.flip_map,
            warnings: &fed.warnings,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends one record to a parameter dump: magic, round, client id and
/// value count (little-endian u64), then the values as little-endian f64.
pub fn write_param_record(
    out: &mut impl Write,
    round: u64,
    client_id: u64,
    values: &[f64],
) -> std::io::Result<()> {
    out.write_all(&PARAM_MAGIC)?;
    out.write_all(&round.to_le_bytes())?;
    out.write_all(&client_id.to_le_bytes())?;
    out.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Record read back from a parameter dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub round: u64,
    pub client_id: u64,
    pub values: Vec<f64>,
}

pub fn read_param_records(bytes: &[u8]) -> Result<Vec<ParamRecord>> {
    let bad = |msg: &str| Error::InvalidParameter(format!("parameter dump: {msg}"));
    let u64_at = |b: &[u8], at: usize| -> Result<u64> {
        b.get(at..at + 8)
            .map(|s| u64::from_le_bytes(s.try_into().expect("8 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    let mut records = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        if bytes.get(at..at + 4) != Some(&PARAM_MAGIC[..]) {
            return Err(bad("bad magic"));
        }
        let round = u64_at(bytes, at + 4)?;
        let client_id = u64_at(bytes, at + 12)?;
        let len = u64_at(bytes, at + 20)? as usize;
        at += 28;
        let body = bytes
            .get(at..at + 8 * len)
            .ok_or_else(|| bad("truncated values"))?;
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += 8 * len;
        records.push(ParamRecord {
            round,
            client_id,
            values,
        });
    }
    Ok(records)
}

#[derive(Serialize)]
struct DefenseLine<'a> {
    round: usize,
    scores: &'a [crate::weidetect::ClientScore],
    shape: Option<f64>,
    scale: Option<f64>,
    floc: f64,
    converged: bool,
    cdf: &'a [f64],
    selected_ids: &'a [usize],
    rejected_ids: &'a [usize],
}

#[derive(Serialize)]
struct PoisonLine<'a> {
    round: usize,
    clients: &'a [crate::orchestrator::ClientAudit],
}

#[derive(Serialize)]
struct ErrorRecord {
    error: String,
    completed_rounds: usize,
}

/// Paths of the files a run writes.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn rounds(&self) -> PathBuf {
        self.dir.join("rounds.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn partition(&self) -> PathBuf {
        self.dir.join("partition.json")
    }
    pub fn defense(&self) -> PathBuf {
        self.dir.join("defense.jsonl")
    }
    pub fn poison(&self) -> PathBuf {
        self.dir.join("poison.jsonl")
    }
    pub fn params(&self) -> PathBuf {
        self.dir.join("params.bin")
    }
    pub fn error(&self) -> PathBuf {
        self.dir.join("error.json")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub summary: ExperimentSummary,
    pub aggregator: String,
    pub attack: String,
    pub poison_ratio: f64,
    pub aux_volume: f64,
    pub target_labels: Vec<usize>,
}

/// Prepares, runs and records one experiment in `dir`.
///
/// Round rows are flushed as they are produced, so an aborted run keeps its
/// partial `rounds.csv` next to an `error.json`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = RunPaths::new(dir);
    let fed = match Federation::prepare(cfg) {
        Ok(fed) => fed,
        Err(e) => {
            write_json(
                &paths.error(),
                &ErrorRecord {
                    error: e.to_string(),
                    completed_rounds: 0,
                },
            )?;
            return Err(e);
        }
    };
    write_json(&paths.manifest(), &Manifest::new(&fed))?;
    fs::write(paths.partition(), fed.partition.to_json()? + "\n")
        .map_err(|e| Error::io(paths.partition(), e))?;

    let mut rounds = create(&paths.rounds())?;
    writeln!(rounds, "{ROUNDS_HEADER}").map_err(|e| Error::io(paths.rounds(), e))?;
    rounds.flush().map_err(|e| Error::io(paths.rounds(), e))?;
    let mut defense = create(&paths.defense())?;
    let mut poison = create(&paths.poison())?;
    let mut params = if cfg.output.dump_params {
        Some(create(&paths.params())?)
    } else {
        None
    };
    let timing = cfg.output.timing;
    let mut completed = 0;

    let result = fed.run(|report, round_params: RoundParams<'_>| {
        writeln!(rounds, "{}", format_round(report, timing))
            .and_then(|_| rounds.flush())
            .map_err(|e| Error::io(paths.rounds(), e))?;
        if let Some(d) = &report.defense {
            let line = DefenseLine {
                round: report.round,
                scores: &d.scores.entries,
                shape: d.fit.converged.then_some(d.fit.shape),
                scale: d.fit.converged.then_some(d.fit.scale),
                floc: d.fit.floc,
                converged: d.fit.converged,
                cdf: &d.fit.cdf_values,
                selected_ids: &d.selection.benign_ids,
                rejected_ids: &d.selection.rejected_ids,
            };
            writeln!(defense, "{}", serde_json::to_string(&line)?)
                .map_err(|e| Error::io(paths.defense(), e))?;
        }
        if !report.poison_audits.is_empty() {
            let line = PoisonLine {
                round: report.round,
                clients: &report.poison_audits,
            };
            writeln!(poison, "{}", serde_json::to_string(&line)?)
                .map_err(|e| Error::io(paths.poison(), e))?;
        }
        if let Some(out) = params.as_mut() {
            let r = round_params.round as u64;
            for m in round_params.clients {
                write_param_record(out, r, m.client_id as u64, m.params.values())
                    .map_err(|e| Error::io(paths.params(), e))?;
            }
            write_param_record(out, r, GLOBAL_ID, round_params.global.values())
                .map_err(|e| Error::io(paths.params(), e))?;
        }
        completed += 1;
        Ok(())
    });
    for (w, p) in [(&mut defense, paths.defense()), (&mut poison, paths.poison())] {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(out) = params.as_mut() {
        out.flush().map_err(|e| Error::io(paths.params(), e))?;
    }

    let reports = match result {
        Ok((reports, _)) => reports,
        Err(e) => {
            write_json(
                &paths.error(),
                &ErrorRecord {
                    error: e.to_string(),
                    completed_rounds: completed,
                },
            )?;
            return Err(e);
        }
    };
    let summary = RunSummary {
        summary: summarize(&reports),
        aggregator: fed.config.defense.kind.to_string(),
        attack: fed.attack.kind.to_string(),
        poison_ratio: fed.attack.poison_ratio,
        aux_volume: fed.config.defense.aux_volume,
        target_labels: fed.attack.target_labels.clone(),
    };
    write_json(&paths.summary(), &summary)?;
    Ok(summary)
}
