//! Targeted data poisoning run by compromised clients.
//!
//! Two families are supported. Adversarial-sample poisoning replaces a share
//! of the target-class samples with perturbed copies (FGSM, PGD or Gaussian
//! noise) crafted against an interim model trained without those classes.
//! Label flipping relabels a share of each source class and leaves features
//! untouched. Samples outside the target classes are never modified.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{round_half_up, Dataset};
use crate::nn::{input_gradient, predict, sgd_epochs, ParamVector, TrainParams};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    GaussianNoise,
    LabelFlip,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::None,
        AttackKind::Fgsm,
        AttackKind::Pgd,
        AttackKind::GaussianNoise,
        AttackKind::LabelFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::GaussianNoise => "gaussian_noise",
            AttackKind::LabelFlip => "label_flip",
        }
    }

    /// Kinds that perturb features rather than labels.
    pub fn crafts_samples(self) -> bool {
        matches!(self, AttackKind::Fgsm | AttackKind::Pgd | AttackKind::GaussianNoise)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown attack kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub target_labels: Vec<usize>,
    /// Fraction of target-class samples poisoned.
    pub poison_ratio: f64,
    pub epsilon: f64,
    pub pgd_steps: usize,
    /// PGD step size; `epsilon / 4` when unset.
    pub pgd_alpha: Option<f64>,
    pub gn_mu: f64,
    pub gn_sigma: f64,
    /// `(source, destination)` pairs for label flipping. When empty the
    /// orchestrator fills in the most-confused destination per source.
    pub flip_map: Vec<(usize, usize)>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            target_labels: Vec::new(),
            poison_ratio: 0.1,
            epsilon: 0.35,
            pgd_steps: 10,
            pgd_alpha: None,
            gn_mu: 0.0,
            gn_sigma: 0.1,
            flip_map: Vec::new(),
        }
    }
}

impl AttackConfig {
    pub fn alpha(&self) -> f64 {
        self.pgd_alpha.unwrap_or(self.epsilon / 4.0)
    }

    /// Checks every field against `class_count`; returns one message per
    /// violation, prefixed with the field name.
    pub fn validate(&self, class_count: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.poison_ratio.is_finite() && (0.0..=1.0).contains(&self.poison_ratio)) {
            errs.push(format!("poison_ratio: must be in [0, 1], got {}", self.poison_ratio));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            errs.push(format!("epsilon: must be >= 0, got {}", self.epsilon));
        }
        if self.pgd_steps == 0 {
            errs.push("pgd_steps: must be >= 1".into());
        }
        if let Some(a) = self.pgd_alpha {
            if !(a.is_finite() && a > 0.0) {
                errs.push(format!("pgd_alpha: must be > 0, got {a}"));
            }
        }
        if !self.gn_mu.is_finite() {
            errs.push("gn_mu: must be finite".into());
        }
        if !(self.gn_sigma.is_finite() && self.gn_sigma >= 0.0) {
            errs.push(format!("gn_sigma: must be >= 0, got {}", self.gn_sigma));
        }
        if self.kind != AttackKind::None && self.target_labels.is_empty() {
            errs.push("target_labels: at least one class is required".into());
        }
        let targets: BTreeSet<usize> = self.target_labels.iter().copied().collect();
        if targets.len() != self.target_labels.len() {
            errs.push("target_labels: duplicate class".into());
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= class_count) {
            errs.push(format!("target_labels: class {bad} out of range (0..{class_count})"));
        }
        for &(src, dst) in &self.flip_map {
            if src >= class_count || dst >= class_count {
                errs.push(format!("flip_map: pair ({src}, {dst}) out of range (0..{class_count})"));
            } else if src == dst {
                errs.push(format!("flip_map: class {src} mapped to itself"));
            }
        }
        if self.kind == AttackKind::LabelFlip && !self.flip_map.is_empty() {
            let sources: BTreeSet<usize> = self.flip_map.iter().map(|p| p.0).collect();
            if sources.len() != self.flip_map.len() {
                errs.push("flip_map: duplicate source class".into());
            }
            if sources != targets {
                errs.push("flip_map: sources must equal target_labels".into());
            }
        }
        errs
    }
}

/// Number of samples poisoned out of `available`: round half up, capped.
pub fn poison_count(available: usize, ratio: f64) -> usize {
    round_half_up(ratio * available as f64).min(available)
}

/// Index bookkeeping for one poisoned shard, exportable for audit.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PoisonAudit {
    /// Target-class rows chosen for poisoning, sorted.
    pub candidate_indices: Vec<usize>,
    /// Rows actually altered, sorted. For crafted samples this is the subset
    /// of candidates that the global model misclassifies.
    pub poisoned_indices: Vec<usize>,
    /// Flip sources or targets with no samples in the shard.
    pub absent_classes: Vec<usize>,
    /// True when the shard held no target samples and trained benignly.
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedShard {
    pub data: Dataset,
    pub audit: PoisonAudit,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed step from `current`, projected onto the `eps` box around
/// `origin` and then onto `[0, 1]`. The box test is repeated on the rounded
/// result so the bound holds exactly in floating point.
fn signed_step(origin: &[f64], current: &[f64], grad: &[f64], step: f64, eps: f64) -> Vec<f64> {
    origin
        .iter()
        .zip(current)
        .zip(grad)
        .map(|((&x, &c), &g)| {
            let mut v = (c + step * sign(g)).clamp(x - eps, x + eps);
            while v - x > eps {
                v = v.next_down();
            }
            while x - v > eps {
                v = v.next_up();
            }
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Fast gradient sign method: one step of size `epsilon` up the loss.
pub fn fgsm(params: &ParamVector, x: &[f64], y: usize, epsilon: f64) -> Result<Vec<f64>> {
    let grad = input_gradient(params, x, y)?;
    Ok(signed_step(x, x, &grad, epsilon, epsilon))
}

/// Projected gradient descent on the loss (ascent), `steps` sign steps of
/// size `alpha`, each projected onto the `epsilon` box around `x` and `[0, 1]`.
pub fn pgd(
    params: &ParamVector,
    x: &[f64],
    y: usize,
    epsilon: f64,
    alpha: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if alpha.is_nan() || alpha <= 0.0 || steps == 0 {
        return Err(Error::InvalidParameter(format!(
            "pgd needs alpha > 0 and steps >= 1, got alpha={alpha}, steps={steps}"
        )));
    }
    let mut current = x.to_vec();
    for _ in 0..steps {
        let grad = input_gradient(params, &current, y)?;
        current = signed_step(x, &current, &grad, alpha, epsilon);
    }
    Ok(current)
}

/// Adds i.i.d. `N(mu, sigma^2)` noise to every coordinate, then clips to `[0, 1]`.
pub fn gaussian_noise(x: &[f64], mu: f64, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("gaussian noise sigma {sigma}")));
    }
    let dist = Normal::new(mu, sigma)
        .map_err(|e| Error::InvalidParameter(format!("gaussian noise: {e}")))?;
    let mut rng = seed::rng(seed);
    Ok(x.iter()
        .map(|&v| (v + dist.sample(&mut rng)).clamp(0.0, 1.0))
        .collect())
}

/// Relabels `poison_count(n_src, ratio)` uniformly chosen samples of each
/// flip source. Sources absent from the shard are recorded, not rejected.
pub fn label_flip(
    shard: &Dataset,
    flip_map: &[(usize, usize)],
    ratio: f64,
    seed: u64,
) -> Result<PoisonedShard> {
    let mut labels = shard.labels().to_vec();
    let by_class = shard.indices_by_class();
    let mut audit = PoisonAudit::default();
    for &(src, dst) in flip_map {
        if src >= shard.class_count() || dst >= shard.class_count() {
            return Err(Error::LabelOutOfRange {
                label: src.max(dst),
                class_count: shard.class_count(),
            });
        }
        let mut pool = by_class[src].clone();
        if pool.is_empty() {
            audit.absent_classes.push(src);
            continue;
        }
        let k = poison_count(pool.len(), ratio);
        pool.shuffle(&mut seed::rng(seed::derive(seed, "flip", &[src as u64])));
        for &i in &pool[..k] {
            labels[i] = dst;
        }
        audit.candidate_indices.extend_from_slice(&pool[..k]);
    }
    audit.candidate_indices.sort_unstable();
    audit.poisoned_indices = audit.candidate_indices.clone();
    let data = shard.with_rows(shard.features().clone(), labels)?;
    Ok(PoisonedShard { data, audit })
}

/// Uniformly chooses `poison_count` rows among those labelled with any
/// target class. Returns sorted indices.
pub fn select_targets(shard: &Dataset, targets: &[usize], ratio: f64, seed: u64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..shard.len())
        .filter(|&i| targets.contains(&shard.labels()[i]))
        .collect();
    let k = poison_count(pool.len(), ratio);
    pool.shuffle(&mut seed::rng(seed));
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

fn craft(
    cfg: &AttackConfig,
    interim: &ParamVector,
    x: &[f64],
    y: usize,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(interim, x, y, cfg.epsilon),
        AttackKind::Pgd => pgd(interim, x, y, cfg.epsilon, cfg.alpha(), cfg.pgd_steps),
        AttackKind::GaussianNoise => gaussian_noise(x, cfg.gn_mu, cfg.gn_sigma, noise_seed),
        AttackKind::None | AttackKind::LabelFlip => Err(Error::InvalidParameter(format!(
            "attack kind `{}` does not craft samples",
            cfg.kind
        ))),
    }
}

/// Builds the adversarial-sample shard of a compromised client.
///
/// Candidates are drawn from the target classes; an interim model is trained
/// from `global` on the remaining samples, perturbed copies are crafted
/// against it, and a copy replaces its original only when `global`
/// misclassifies it. The stored label stays the original target class.
pub fn craft_poisoned_shard(
    global: &ParamVector,
    shard: &Dataset,
    cfg: &AttackConfig,
    hp: &TrainParams,
    seed: u64,
) -> Result<PoisonedShard> {
    let mut audit = PoisonAudit {
        candidate_indices: select_targets(
            shard,
            &cfg.target_labels,
            cfg.poison_ratio,
            seed::derive(seed, "poison-select", &[]),
        ),
        ..PoisonAudit::default()
    };
    let hist = shard.class_histogram();
    audit.absent_classes = cfg
        .target_labels
        .iter()
        .copied()
        .filter(|&c| hist.get(c).copied().unwrap_or(0) == 0)
        .collect();
    if audit.candidate_indices.is_empty() {
        return Ok(PoisonedShard {
            data: shard.clone(),
            audit,
        });
    }

    let clean: Vec<usize> = (0..shard.len())
        .filter(|&i| !cfg.target_labels.contains(&shard.labels()[i]))
        .collect();
    let interim = if clean.is_empty() {
        global.clone()
    } else {
        let clean_data = shard.subset(&clean);
        sgd_epochs(global, &clean_data.batch(), hp, seed::derive(seed, "interim", &[]))?
    };

    let mut features = shard.features().clone();
    let mut crafted_rows = Vec::with_capacity(audit.candidate_indices.len() * shard.dim());
    let mut crafted_labels = Vec::with_capacity(audit.candidate_indices.len());
    for &i in &audit.candidate_indices {
        let y = shard.labels()[i];
        let noise_seed = seed::derive(seed, "noise", &[i as u64]);
        crafted_rows.extend(craft(cfg, &interim, shard.row(i), y, noise_seed)?);
        crafted_labels.push(y);
    }
    let verdicts = predict(
        global,
        &crate::nn::Batch::new(&crafted_rows, &crafted_labels, shard.dim())?,
    )?;
    let dim = shard.dim();
    for (k, &i) in audit.candidate_indices.iter().enumerate() {
        if verdicts[k] != crafted_labels[k] {
            features
                .row_mut(i)
                .copy_from_slice(&crafted_rows[k * dim..(k + 1) * dim]);
            audit.poisoned_indices.push(i);
        }
    }
    let data = shard.with_rows(features, shard.labels().to_vec())?;
    Ok(PoisonedShard { data, audit })
}

/// Local model and poisoning record of one client round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ParamVector,
    pub audit: Option<PoisonAudit>,
}

/// Local training of a compromised client.
///
/// The poisoned shard is trained with the same `seed` a benign client would
/// use, so `AttackKind::None` or a zero ratio reproduces benign training
/// exactly. A shard without target samples falls back to benign training
/// and is flagged in the audit.
pub fn adversarial_client_update(
    global: &ParamVector,
    shard: &Dataset,
    cfg: &AttackConfig,
    hp: &TrainParams,
    seed: u64,
) -> Result<LocalUpdate> {
    let poisoned = match cfg.kind {
        AttackKind::None => None,
        AttackKind::LabelFlip => Some(label_flip(
            shard,
            &cfg.flip_map,
            cfg.poison_ratio,
            seed::derive(seed, "poison-select", &[]),
        )?),
        _ => Some(craft_poisoned_shard(global, shard, cfg, hp, seed)?),
    };
    let Some(mut poisoned) = poisoned else {
        return Ok(LocalUpdate {
            params: sgd_epochs(global, &shard.batch(), hp, seed)?,
            audit: None,
        });
    };
    let has_targets = shard
        .labels()
        .iter()
        .any(|y| cfg.target_labels.contains(y));
    poisoned.audit.fell_back = !has_targets;
    let params = sgd_epochs(global, &poisoned.data.batch(), hp, seed)?;
    Ok(LocalUpdate {
        params,
        audit: Some(poisoned.audit),
    })
}
