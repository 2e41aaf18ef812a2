//! Desk-scale synthetic stand-in for flow-feature corpora: one Gaussian blob
//! per class around a random centre, clipped to `[0, 1]`.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::nn::Matrix;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub class_count: usize,
    pub dim: usize,
    /// Samples per class; may be imbalanced.
    pub per_class_counts: Vec<usize>,
    /// Distance between class centres in units of `spread`.
    pub separation: f64,
    /// Per-coordinate standard deviation of each blob.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.dim == 0 {
            return Err(Error::InvalidParameter("class_count and dim must be >= 1".into()));
        }
        if self.per_class_counts.len() != self.class_count {
            return Err(Error::InvalidParameter(format!(
                "per_class_counts has {} entries for {} classes",
                self.per_class_counts.len(),
                self.class_count
            )));
        }
        if self.per_class_counts.iter().sum::<usize>() == 0 {
            return Err(Error::EmptyDataset("all class counts are zero".into()));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "separation must be > 0, got {}",
                self.separation
            )));
        }
        if !(self.spread.is_finite() && self.spread > 0.0) {
            return Err(Error::InvalidParameter(format!("spread must be > 0, got {}", self.spread)));
        }
        Ok(())
    }
}

/// Centres sit at `0.5 + r * u_c` with `u_c` a random unit vector and
/// `r = separation * spread / sqrt(2)`, so two centres are on average
/// `separation * spread` apart (random directions are near-orthogonal).
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let radius = spec.separation * spec.spread / std::f64::consts::SQRT_2;

    let centres: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            let g: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            g.iter().map(|v| 0.5 + radius * v / norm).collect()
        })
        .collect();

    let noise = Normal::new(0.0, spec.spread).expect("validated spread");
    let total: usize = spec.per_class_counts.iter().sum();
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(total);
    for (class, (&count, centre)) in spec.per_class_counts.iter().zip(&centres).enumerate() {
        for _ in 0..count {
            let x = centre
                .iter()
                .map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            rows.push((x, class));
        }
    }
    rows.shuffle(&mut rng);

    let mut data = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (x, y) in rows {
        data.extend(x);
        labels.push(y);
    }
    Dataset::new(
        "synthetic",
        Matrix::new(total, spec.dim, data)?,
        labels,
        spec.class_count,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(counts: Vec<usize>, separation: f64) -> SynthSpec {
        SynthSpec {
            class_count: counts.len(),
            dim: 5,
            per_class_counts: counts,
            separation,
            spread: 0.1,
        }
    }

    #[test]
    fn histogram_is_exact() {
        let d = synthesize(&spec(vec![500, 10], 3.0), 1).unwrap();
        assert_eq!(d.class_histogram(), vec![500, 10]);
        assert!(d.features().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = synthesize(&spec(vec![50, 50], 3.0), 4).unwrap();
        let b = synthesize(&spec(vec![50, 50], 3.0), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthesize(&spec(vec![50, 50], 3.0), 5).unwrap());
    }

    #[test]
    fn non_positive_separation_rejected() {
        assert!(synthesize(&spec(vec![5, 5], 0.0), 1).is_err());
        assert!(synthesize(&spec(vec![5, 5], -1.0), 1).is_err());
    }
}
