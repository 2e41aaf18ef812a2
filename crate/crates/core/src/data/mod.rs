//! Datasets and their preparation for federated training.
//!
//! Features are always normalised to `[0, 1]`; the attack module relies on
//! that range when it clips perturbed samples.

mod auxiliary;
mod ingest;
mod partition;
mod split;
mod synth;

pub use auxiliary::{build_auxiliary, AuxiliaryDataset};
pub use ingest::{load_csv, parse_csv, CsvSchema};
pub use partition::{dirichlet_partition, PartitionPlan};
pub use split::{split, stratified_take, SplitOutcome};
pub use synth::{synthesize, SynthSpec};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::nn::{Batch, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let class_names = (0..class_count).map(|c| c.to_string()).collect();
        Self::with_class_names(name, features, labels, class_names)
    }

    pub fn with_class_names(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let class_count = class_names.len();
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::LabelOutOfRange { label, class_count });
        }
        if features.as_slice().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("dataset construction"));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            class_count,
            class_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::from_matrix(&self.features, &self.labels).expect("dataset shape is validated")
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Row indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            groups[y].push(i);
        }
        groups
    }

    /// New dataset holding the listed rows in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        }
    }

    /// Same rows with different labels or features; shapes must match.
    pub fn with_rows(&self, features: Matrix, labels: Vec<usize>) -> Result<Dataset> {
        if features.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: features.cols(),
            });
        }
        Dataset::with_class_names(self.name.clone(), features, labels, self.class_names.clone())
    }

    /// SHA-256 over shape, features (bit patterns) and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.class_count as u64).to_le_bytes());
        for v in self.features.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            name: self.name.clone(),
            rows: self.len(),
            dim: self.dim(),
            class_histogram: self.class_histogram(),
            fingerprint: self.fingerprint(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub name: String,
    pub rows: usize,
    pub dim: usize,
    pub class_histogram: Vec<usize>,
    pub fingerprint: String,
}

/// Round half up, the rounding used for every sample count in the crate.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}
