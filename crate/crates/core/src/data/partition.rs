//! Non-IID client partitioning by per-class Dirichlet draws.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub eta: f64,
    pub client_count: usize,
    pub seed: u64,
    /// Client id to the sorted row indices it owns.
    pub clients: BTreeMap<usize, Vec<usize>>,
}

impl PartitionPlan {
    pub fn assignments(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.clients.values()
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        self.clients.get(&client).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.values().map(Vec::len).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Each class's rows are shuffled and cut into `client_count` consecutive
/// chunks whose sizes follow one Dirichlet(`eta`) draw. Clients left empty
/// afterwards each receive one row from the currently largest client.
pub fn dirichlet_partition(
    train: &Dataset,
    eta: f64,
    client_count: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be > 0, got {eta}")));
    }
    if client_count < 2 {
        return Err(Error::InvalidParameter(format!(
            "client_count must be >= 2, got {client_count}"
        )));
    }
    if train.len() < client_count {
        return Err(Error::InvalidParameter(format!(
            "{} samples cannot cover {client_count} clients",
            train.len()
        )));
    }

    let gamma = Gamma::new(eta, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); client_count];

    for mut rows in train.indices_by_class() {
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng);
        let mut weights: Vec<f64> = (0..client_count).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            // Every gamma draw underflowed: the limit is a point mass.
            let winner = rng.random_range(0..client_count);
            weights = (0..client_count).map(|k| (k == winner) as u8 as f64).collect();
        } else {
            weights.iter_mut().for_each(|w| *w /= total);
        }

        let n = rows.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (k, w) in weights.iter().enumerate() {
            cumulative += w;
            let end = if k + 1 == client_count {
                n
            } else {
                ((cumulative * n as f64).floor() as usize).clamp(start, n)
            };
            shards[k].extend_from_slice(&rows[start..end]);
            start = end;
        }
    }

    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..client_count)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least two clients");
        let moved = shards[donor].pop().expect("donor holds several rows");
        shards[empty].push(moved);
    }

    let clients = shards
        .into_iter()
        .enumerate()
        .map(|(k, mut s)| {
            s.sort_unstable();
            (k, s)
        })
        .collect();
    Ok(PartitionPlan {
        eta,
        client_count,
        seed,
        clients,
    })
}
