//! Server-side aggregation rules over client parameter vectors.
//!
//! Krum and Multi-Krum follow Blanchard et al.: each update is scored by the
//! sum of squared distances to its `n - f - 2` nearest neighbours. Median and
//! trimmed mean act coordinate by coordinate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::ParamVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    FedAvg,
    Krum,
    MultiKrum,
    Median,
    TrimmedMean,
    WeiDetect,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 6] = [
        AggregatorKind::FedAvg,
        AggregatorKind::Krum,
        AggregatorKind::MultiKrum,
        AggregatorKind::Median,
        AggregatorKind::TrimmedMean,
        AggregatorKind::WeiDetect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::FedAvg => "fedavg",
            AggregatorKind::Krum => "krum",
            AggregatorKind::MultiKrum => "multikrum",
            AggregatorKind::Median => "median",
            AggregatorKind::TrimmedMean => "trimmedmean",
            AggregatorKind::WeiDetect => "weidetect",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown aggregator `{s}`")))
    }
}

/// Aggregator choice plus its optional tuning. Unset values resolve against
/// the number of updates `n` at call time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    /// Assumed Byzantine count for Krum / Multi-Krum; default `floor(0.15 n)`.
    pub f: Option<usize>,
    /// Updates averaged by Multi-Krum; default `n - f`.
    pub m_select: Option<usize>,
    /// Values trimmed from each side by the trimmed mean; default `floor(0.15 n)`.
    pub trim_k: Option<usize>,
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind) -> Self {
        Self {
            kind,
            f: None,
            m_select: None,
            trim_k: None,
        }
    }

    pub fn byzantine_count(&self, n: usize) -> usize {
        self.f.unwrap_or(n * 15 / 100)
    }

    pub fn select_count(&self, n: usize) -> usize {
        self.m_select
            .unwrap_or_else(|| n.saturating_sub(self.byzantine_count(n)))
    }

    pub fn trim_count(&self, n: usize) -> usize {
        self.trim_k.unwrap_or(n * 15 / 100)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub params: ParamVector,
    /// Positions (into the update list) of the updates that contributed.
    pub selected: Vec<usize>,
}

fn check_updates(updates: &[ParamVector]) -> Result<()> {
    let first = updates.first().ok_or(Error::TooFewUpdates {
        rule: "aggregation",
        required: 1,
        actual: 0,
    })?;
    for u in &updates[1..] {
        if u.arch() != first.arch() {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                actual: u.len(),
            });
        }
    }
    Ok(())
}

fn with_values(template: &ParamVector, values: Vec<f64>) -> Result<ParamVector> {
    ParamVector::from_values(template.arch().clone(), values)
}

/// Unweighted coordinate mean, computed as `u_0 + sum(u_i - u_0) / m` so that
/// identical inputs come back bit for bit.
pub fn fedavg(updates: &[ParamVector]) -> Result<ParamVector> {
    check_updates(updates)?;
    let base = updates[0].values();
    let mut acc = vec![0.0; base.len()];
    for u in &updates[1..] {
        for ((a, &v), &b) in acc.iter_mut().zip(u.values()).zip(base) {
            *a += v - b;
        }
    }
    let m = updates.len() as f64;
    let values = acc.iter().zip(base).map(|(a, &b)| b + a / m).collect();
    with_values(&updates[0], values)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum score of every update. Requires `n >= 2f + 3`.
pub fn krum_scores(updates: &[ParamVector], f: usize) -> Result<Vec<f64>> {
    check_updates(updates)?;
    let n = updates.len();
    let required = 2 * f + 3;
    if n < required {
        return Err(Error::TooFewUpdates {
            rule: "krum",
            required,
            actual: n,
        });
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(updates[i].values(), updates[j].values());
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let neighbours = n - f - 2;
    let mut row = Vec::with_capacity(n - 1);
    Ok((0..n)
        .map(|i| {
            row.clear();
            row.extend((0..n).filter(|&j| j != i).map(|j| dist[i * n + j]));
            row.sort_by(f64::total_cmp);
            row[..neighbours].iter().sum()
        })
        .collect())
}

/// Positions sorted by ascending Krum score, ties to the lower position.
fn krum_ranking(updates: &[ParamVector], f: usize) -> Result<Vec<usize>> {
    let scores = krum_scores(updates, f)?;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(order)
}

pub fn krum_select(updates: &[ParamVector], f: usize) -> Result<usize> {
    Ok(krum_ranking(updates, f)?[0])
}

pub fn krum(updates: &[ParamVector], f: usize) -> Result<ParamVector> {
    Ok(updates[krum_select(updates, f)?].clone())
}

/// The `m_select` lowest-scoring positions, in ascending position order.
pub fn multi_krum_select(updates: &[ParamVector], f: usize, m_select: usize) -> Result<Vec<usize>> {
    if m_select == 0 || m_select > updates.len() {
        return Err(Error::InvalidParameter(format!(
            "m_select must be in 1..={}, got {m_select}",
            updates.len()
        )));
    }
    let mut chosen = krum_ranking(updates, f)?;
    chosen.truncate(m_select);
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn multi_krum(updates: &[ParamVector], f: usize, m_select: usize) -> Result<ParamVector> {
    let chosen = multi_krum_select(updates, f, m_select)?;
    let picked: Vec<ParamVector> = chosen.iter().map(|&i| updates[i].clone()).collect();
    fedavg(&picked)
}

/// Comparators of Batcher's merge-exchange network for `n` inputs. Applying
/// them in order as compare-exchange steps sorts any input.
fn merge_exchange_network(n: usize) -> Vec<(usize, usize)> {
    let mut net = Vec::new();
    if n < 2 {
        return net;
    }
    let t = usize::BITS - (n - 1).leading_zeros();
    let mut p = 1usize << (t - 1);
    while p > 0 {
        let (mut q, mut r, mut d) = (1usize << (t - 1), 0, p);
        loop {
            net.extend((0..n - d).filter(|&i| i & p == r).map(|i| (i, i + d)));
            if q == p {
                break;
            }
            d = q - p;
            q /= 2;
            r = p;
        }
        p /= 2;
    }
    net
}

const COLUMN_BLOCK: usize = 128;

/// Sorts every coordinate column across the updates, one block of columns at
/// a time, and hands each sorted block to `reduce` as `n` rows of `width`
/// values. The network is branch-free, so the inner loops vectorize.
fn sorted_columns(updates: &[ParamVector], mut reduce: impl FnMut(&[f64], usize, usize)) {
    let n = updates.len();
    let d = updates[0].len();
    let net = merge_exchange_network(n);
    let mut block = vec![0.0; n * COLUMN_BLOCK];
    let mut start = 0;
    while start < d {
        let width = COLUMN_BLOCK.min(d - start);
        for (row, u) in updates.iter().enumerate() {
            block[row * COLUMN_BLOCK..row * COLUMN_BLOCK + width]
                .copy_from_slice(&u.values()[start..start + width]);
        }
        for &(i, j) in &net {
            let (head, tail) = block.split_at_mut(j * COLUMN_BLOCK);
            let lower = &mut head[i * COLUMN_BLOCK..i * COLUMN_BLOCK + width];
            for (a, b) in lower.iter_mut().zip(&mut tail[..width]) {
                let (lo, hi) = (a.min(*b), a.max(*b));
                *a = lo;
                *b = hi;
            }
        }
        reduce(&block, start, width);
        start += width;
    }
}

/// Coordinate-wise median; the mean of the two middle values for even `n`.
pub fn coord_median(updates: &[ParamVector]) -> Result<ParamVector> {
    check_updates(updates)?;
    let n = updates.len();
    let mid = n / 2;
    let mut values = vec![0.0; updates[0].len()];
    sorted_columns(updates, |block, start, width| {
        let upper = &block[mid * COLUMN_BLOCK..mid * COLUMN_BLOCK + width];
        let out = &mut values[start..start + width];
        if n % 2 == 1 {
            out.copy_from_slice(upper);
        } else {
            let lower = &block[(mid - 1) * COLUMN_BLOCK..(mid - 1) * COLUMN_BLOCK + width];
            for ((o, a), b) in out.iter_mut().zip(lower).zip(upper) {
                *o = (a + b) / 2.0;
            }
        }
    });
    with_values(&updates[0], values)
}

/// Coordinate-wise mean after dropping the `trim_k` smallest and largest
/// values. Kept values are summed in ascending order.
pub fn trimmed_mean(updates: &[ParamVector], trim_k: usize) -> Result<ParamVector> {
    check_updates(updates)?;
    let n = updates.len();
    if 2 * trim_k >= n {
        return Err(Error::InvalidParameter(format!(
            "trim_k = {trim_k} must be below n / 2 = {}",
            n as f64 / 2.0
        )));
    }
    let kept = (n - 2 * trim_k) as f64;
    let mut values = vec![0.0; updates[0].len()];
    sorted_columns(updates, |block, start, width| {
        let out = &mut values[start..start + width];
        for row in trim_k..n - trim_k {
            let sorted = &block[row * COLUMN_BLOCK..row * COLUMN_BLOCK + width];
            for (o, v) in out.iter_mut().zip(sorted) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= kept;
        }
    });
    with_values(&updates[0], values)
}

/// Runs one of the baseline rules. WeiDetect needs the auxiliary dataset and
/// lives in [`crate::weidetect`].
pub fn aggregate(spec: &AggregatorSpec, updates: &[ParamVector]) -> Result<Aggregated> {
    let n = updates.len();
    let all: Vec<usize> = (0..n).collect();
    match spec.kind {
        AggregatorKind::FedAvg => Ok(Aggregated {
            params: fedavg(updates)?,
            selected: all,
        }),
        AggregatorKind::Krum => {
            let i = krum_select(updates, spec.byzantine_count(n))?;
            Ok(Aggregated {
                params: updates[i].clone(),
                selected: vec![i],
            })
        }
        AggregatorKind::MultiKrum => {
            let f = spec.byzantine_count(n);
            let chosen = multi_krum_select(updates, f, spec.select_count(n))?;
            let picked: Vec<ParamVector> = chosen.iter().map(|&i| updates[i].clone()).collect();
            Ok(Aggregated {
                params: fedavg(&picked)?,
                selected: chosen,
            })
        }
        AggregatorKind::Median => Ok(Aggregated {
            params: coord_median(updates)?,
            selected: all,
        }),
        AggregatorKind::TrimmedMean => Ok(Aggregated {
            params: trimmed_mean(updates, spec.trim_count(n))?,
            selected: all,
        }),
        AggregatorKind::WeiDetect => Err(Error::InvalidParameter(
            "weidetect aggregation requires the auxiliary dataset".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpArchitecture;
    use proptest::prelude::*;

    /// Parameter vectors of an architecture with exactly `d` parameters
    /// (`d - 1` inputs, no hidden layer, one output).
    fn vecs(rows: &[Vec<f64>]) -> Vec<ParamVector> {
        let d = rows[0].len();
        let arch = MlpArchitecture::new(d - 1, vec![], 1).unwrap();
        rows.iter()
            .map(|r| ParamVector::from_values(arch.clone(), r.clone()).unwrap())
            .collect()
    }

    #[test]
    fn merge_exchange_sorts_every_binary_input() {
        // 0-1 principle: a network that sorts all 0/1 inputs sorts everything.
        for n in 1..=20 {
            let net = merge_exchange_network(n);
            for bits in 0u32..(1 << n) {
                let mut v: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
                for &(i, j) in &net {
                    if v[i] > v[j] {
                        v.swap(i, j);
                    }
                }
                assert!(v.windows(2).all(|w| w[0] <= w[1]), "n = {n}, input {bits:b}");
            }
        }
    }

    #[test]
    fn fedavg_basics() {
        let v = vecs(&[vec![0.1, 0.7], vec![0.1, 0.7], vec![0.1, 0.7]]);
        assert_eq!(fedavg(&v).unwrap().values(), &[0.1, 0.7]);
        let v = vecs(&[vec![0.0, 0.0], vec![2.0, 4.0]]);
        assert_eq!(fedavg(&v).unwrap().values(), &[1.0, 2.0]);
        assert!(fedavg(&[]).is_err());
    }

    #[test]
    fn fedavg_rejects_mixed_architectures() {
        let a = vecs(&[vec![1.0, 2.0]]);
        let b = vecs(&[vec![1.0, 2.0, 3.0]]);
        assert!(fedavg(&[a[0].clone(), b[0].clone()]).is_err());
    }

    #[test]
    fn krum_rejects_outlier() {
        let v = vecs(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![100.0, -50.0], vec![1.0, 1.0]]);
        assert_eq!(krum(&v, 0).unwrap().values(), &[1.0, 1.0]);
        assert_ne!(krum_select(&v, 0).unwrap(), 2);
    }

    #[test]
    fn krum_requires_enough_updates() {
        let v = vecs(&vec![vec![1.0, 0.0]; 4]);
        match krum(&v, 1) {
            Err(Error::TooFewUpdates { required, .. }) => assert_eq!(required, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn multi_krum_with_everything_selected_is_fedavg() {
        let v = vecs(&[vec![0.3, 1.0], vec![2.0, -1.0], vec![0.5, 0.5], vec![4.0, 2.0]]);
        assert_eq!(
            multi_krum(&v, 0, 4).unwrap().values(),
            fedavg(&v).unwrap().values()
        );
    }

    #[test]
    fn median_and_trimmed_mean_reject_outlier() {
        let v = vecs(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![100.0, 0.0]]);
        assert_eq!(coord_median(&v).unwrap().values(), &[2.0, 0.0]);
        assert_eq!(trimmed_mean(&v, 1).unwrap().values(), &[2.0, 0.0]);
        let even = vecs(&[vec![1.0, 0.0], vec![3.0, 0.0]]);
        assert_eq!(coord_median(&even).unwrap().values(), &[2.0, 0.0]);
        assert!(trimmed_mean(&even, 1).is_err());
    }

    #[test]
    fn aggregate_dispatch_reports_selection() {
        let v = vecs(&[vec![1.0, 1.0], vec![1.0, 1.1], vec![1.1, 1.0], vec![9.0, 9.0], vec![1.0, 0.9]]);
        let mut spec = AggregatorSpec::new(AggregatorKind::MultiKrum);
        spec.f = Some(1);
        spec.m_select = Some(3);
        let out = aggregate(&spec, &v).unwrap();
        assert_eq!(out.selected.len(), 3);
        assert!(!out.selected.contains(&3));
        let spec = AggregatorSpec::new(AggregatorKind::WeiDetect);
        assert!(aggregate(&spec, &v).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in AggregatorKind::ALL {
            assert_eq!(k.name().parse::<AggregatorKind>().unwrap(), k);
        }
    }

    fn update_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (3usize..9, 2usize..6).prop_flat_map(|(n, d)| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n)
        })
    }

    proptest! {
        #[test]
        fn robust_outputs_stay_inside_coordinate_range(rows in update_sets()) {
            let v = vecs(&rows);
            let med = coord_median(&v).unwrap();
            let tm = trimmed_mean(&v, (rows.len() - 1) / 2).unwrap();
            for c in 0..rows[0].len() {
                let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= med.values()[c] && med.values()[c] <= hi);
                prop_assert!(lo <= tm.values()[c] && tm.values()[c] <= hi);
            }
        }

        #[test]
        fn permutation_invariance(rows in update_sets(), shift in 1usize..8) {
            let v = vecs(&rows);
            let mut rotated = v.clone();
            rotated.rotate_left(shift % v.len());
            prop_assert_eq!(coord_median(&v).unwrap(), coord_median(&rotated).unwrap());
            prop_assert_eq!(trimmed_mean(&v, 1).unwrap(), trimmed_mean(&rotated, 1).unwrap());
            let a = fedavg(&v).unwrap();
            let b = fedavg(&rotated).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            // Krum picks the same vector unless scores tie.
            let scores = krum_scores(&v, 0).unwrap();
            let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
            if scores.iter().filter(|&&s| s == best).count() == 1 {
                prop_assert_eq!(krum(&v, 0).unwrap(), krum(&rotated, 0).unwrap());
            }
        }

        #[test]
        fn fedavg_is_linear(rows in update_sets(), a in -3.0f64..3.0) {
            let v = vecs(&rows);
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| a * x).collect()).collect();
            let lhs = fedavg(&vecs(&scaled)).unwrap();
            let rhs = fedavg(&v).unwrap();
            for (x, y) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((x - a * y).abs() < 1e-9);
            }
        }

        #[test]
        fn krum_output_is_an_input(rows in update_sets()) {
            let v = vecs(&rows);
            let f = (rows.len() - 3) / 2;
            let out = krum(&v, f).unwrap();
            prop_assert!(v.contains(&out));
        }
    }
}
