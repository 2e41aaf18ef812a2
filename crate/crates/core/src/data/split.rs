use rand::seq::SliceRandom;

use super::{round_half_up, Dataset};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Stratified train/test split. The overall test size is
/// `round(test_fraction * n)` over classes with at least two samples, shared
/// between classes by largest remainder so every class lands within one
/// sample of its exact share. Singleton classes stay in train.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitOutcome> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("cannot split an empty dataset".into()));
    }
    let (test_indices, train_indices, warnings) = stratified_take(dataset, test_fraction, seed);
    Ok(SplitOutcome {
        train: dataset.subset(&train_indices),
        test: dataset.subset(&test_indices),
        train_indices,
        test_indices,
        warnings,
    })
}

/// Draws a stratified `fraction` of rows. Returns `(taken, rest, warnings)`,
/// both index lists sorted.
pub fn stratified_take(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<String>) {
    let groups = dataset.indices_by_class();
    let mut warnings = Vec::new();
    let eligible: Vec<usize> = (0..groups.len()).filter(|&c| groups[c].len() >= 2).collect();
    for (c, g) in groups.iter().enumerate() {
        if g.len() == 1 {
            warnings.push(format!(
                "class {} has a single sample; kept on the larger side of the split",
                dataset.class_names()[c]
            ));
        }
    }

    let n_eligible: usize = eligible.iter().map(|&c| groups[c].len()).sum();
    let target = round_half_up(fraction * n_eligible as f64);
    let mut take = vec![0usize; groups.len()];
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for &c in &eligible {
        let exact = fraction * groups[c].len() as f64;
        take[c] = (exact.floor() as usize).min(groups[c].len() - 1);
        remainders.push((exact - exact.floor(), c));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assigned: usize = take.iter().sum();
    for &(_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
        if assigned >= target {
            break;
        }
        if take[c] < groups[c].len() - 1 {
            take[c] += 1;
            assigned += 1;
        }
    }

    let mut rng = seed::rng(seed);
    let mut taken = Vec::new();
    let mut rest = Vec::new();
    for (c, group) in groups.into_iter().enumerate() {
        let mut g = group;
        g.shuffle(&mut rng);
        taken.extend_from_slice(&g[..take[c]]);
        rest.extend_from_slice(&g[take[c]..]);
    }
    taken.sort_unstable();
    rest.sort_unstable();
    (taken, rest, warnings)
}
