//! Server-side auxiliary dataset: pool samples that a reference model
//! classifies correctly with high confidence, optionally thinned per class.

use rand::seq::SliceRandom;

use super::{round_half_up, Dataset};
use crate::nn::{predict_with_confidence, ParamVector};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AuxiliaryDataset {
    pub data: Dataset,
    /// Row indices into the pool, sorted.
    pub pool_indices: Vec<usize>,
    pub confidence_threshold: f64,
    pub volume_fraction: f64,
    pub warnings: Vec<String>,
}

impl AuxiliaryDataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Keeps pool rows predicted correctly with max probability strictly above
/// `threshold`, then keeps `round(volume_fraction * count)` of each class
/// (at least one when the class qualified at all).
pub fn build_auxiliary(
    reference: &ParamVector,
    pool: &Dataset,
    threshold: f64,
    volume_fraction: f64,
    seed: u64,
) -> Result<AuxiliaryDataset> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence threshold must be in (0, 1), got {threshold}"
        )));
    }
    if !(volume_fraction > 0.0 && volume_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "volume fraction must be in (0, 1], got {volume_fraction}"
        )));
    }
    if pool.is_empty() {
        return Err(Error::EmptyAuxiliary);
    }

    let preds = predict_with_confidence(reference, &pool.batch())?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.class_count()];
    for (i, (&y, &(pred, conf))) in pool.labels().iter().zip(&preds).enumerate() {
        if pred == y && conf > threshold {
            by_class[y].push(i);
        }
    }

    let present = pool.class_histogram();
    let mut warnings = Vec::new();
    let mut rng = seed::rng(seed);
    let mut kept = Vec::new();
    for (c, mut rows) in by_class.into_iter().enumerate() {
        if rows.is_empty() {
            if present[c] > 0 {
                warnings.push(format!(
                    "class {} has no sample above confidence {threshold}",
                    pool.class_names()[c]
                ));
            }
            continue;
        }
        if volume_fraction < 1.0 {
            let keep = round_half_up(volume_fraction * rows.len() as f64).max(1);
            rows.shuffle(&mut rng);
            rows.truncate(keep);
        }
        kept.extend(rows);
    }
    if kept.is_empty() {
        return Err(Error::EmptyAuxiliary);
    }
    kept.sort_unstable();

    Ok(AuxiliaryDataset {
        data: pool.subset(&kept),
        pool_indices: kept,
        confidence_threshold: threshold,
        volume_fraction,
        warnings,
    })
}
