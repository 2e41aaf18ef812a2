//! Generic ingestion for flow-feature CSV exports.
//!
//! Preprocessing order: drop configured columns, drop rows with missing or
//! non-finite values, drop duplicate rows, one-hot encode categorical
//! columns in place, min-max normalise numeric columns.

use std::collections::{BTreeSet, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::nn::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    #[serde(default)]
    pub drop_columns: Vec<String>,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    /// Ordered class names. When present, any other label value is an error;
    /// when absent, classes are the sorted distinct label values.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(default = "default_missing")]
    pub missing_tokens: Vec<String>,
}

fn default_missing() -> Vec<String> {
    ["", "NaN", "nan", "NA", "null", "?"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            drop_columns: Vec::new(),
            categorical_columns: Vec::new(),
            classes: None,
            missing_tokens: default_missing(),
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }
}

enum ColumnKind {
    Numeric,
    Categorical,
}

struct Column {
    source: usize,
    kind: ColumnKind,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    parse_csv(file, schema, &name)
}

/// Row numbers in errors count data rows from 0, header excluded.
pub fn parse_csv<R: Read>(reader: R, schema: &CsvSchema, name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |col: &str| headers.iter().position(|h| h == col);

    let label_idx = find(&schema.label_column).ok_or_else(|| {
        Error::InvalidParameter(format!("label column `{}` not in header", schema.label_column))
    })?;
    for col in schema.drop_columns.iter().chain(&schema.categorical_columns) {
        if find(col).is_none() {
            return Err(Error::InvalidParameter(format!("column `{col}` not in header")));
        }
    }

    let columns: Vec<Column> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| *i != label_idx && !schema.drop_columns.contains(h))
        .map(|(i, h)| Column {
            source: i,
            kind: if schema.categorical_columns.contains(h) {
                ColumnKind::Categorical
            } else {
                ColumnKind::Numeric
            },
        })
        .collect();

    let missing: HashSet<&str> = schema.missing_tokens.iter().map(String::as_str).collect();
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut labels_raw: Vec<String> = Vec::new();

    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let label = cell(label_idx);
        if missing.contains(label) {
            continue;
        }
        if let Some(classes) = &schema.classes {
            if !classes.iter().any(|c| c == label) {
                return Err(Error::CsvRow {
                    row: row_idx,
                    message: format!("unknown label `{label}`"),
                });
            }
        }
        let mut kept = Vec::with_capacity(columns.len() + 1);
        let mut is_missing = false;
        for col in &columns {
            let v = cell(col.source);
            if missing.contains(v) {
                is_missing = true;
                break;
            }
            if let ColumnKind::Numeric = col.kind {
                match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => {}
                    // "Infinity" and friends count as missing measurements.
                    Ok(_) => {
                        is_missing = true;
                        break;
                    }
                    Err(_) => {
                        return Err(Error::CsvRow {
                            row: row_idx,
                            message: format!(
                                "non-numeric value `{v}` in column `{}`",
                                headers[col.source]
                            ),
                        })
                    }
                }
            }
            kept.push(v.to_string());
        }
        if is_missing {
            continue;
        }
        kept.push(label.to_string());
        if seen.insert(kept.clone()) {
            labels_raw.push(kept.pop().expect("label pushed"));
            rows.push(kept);
        }
    }

    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{name}: no rows left after preprocessing")));
    }

    let class_names: Vec<String> = match &schema.classes {
        Some(c) => c.clone(),
        None => labels_raw
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let labels: Vec<usize> = labels_raw
        .iter()
        .map(|l| class_names.iter().position(|c| c == l).expect("known class"))
        .collect();

    // Per output block: (start column in the encoded matrix, width).
    let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(columns.len());
    let mut widths = Vec::with_capacity(columns.len());
    for (c, col) in columns.iter().enumerate() {
        match col.kind {
            ColumnKind::Numeric => {
                let vals: Vec<f64> = rows.iter().map(|r| r[c].parse().expect("checked")).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                blocks.push(
                    vals.iter()
                        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                        .collect(),
                );
                widths.push(1);
            }
            ColumnKind::Categorical => {
                let cats: Vec<&str> = rows
                    .iter()
                    .map(|r| r[c].as_str())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let mut block = vec![0.0; rows.len() * cats.len()];
                for (i, r) in rows.iter().enumerate() {
                    let k = cats.binary_search(&r[c].as_str()).expect("category present");
                    block[i * cats.len() + k] = 1.0;
                }
                blocks.push(block);
                widths.push(cats.len());
            }
        }
    }

    let dim: usize = widths.iter().sum();
    if dim == 0 {
        return Err(Error::EmptyDataset(format!("{name}: no feature columns")));
    }
    let mut data = Vec::with_capacity(rows.len() * dim);
    for i in 0..rows.len() {
        for (block, &w) in blocks.iter().zip(&widths) {
            data.extend_from_slice(&block[i * w..(i + 1) * w]);
        }
    }
    Dataset::with_class_names(name, Matrix::new(rows.len(), dim, data)?, labels, class_names)
}
