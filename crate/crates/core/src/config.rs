//! Declarative experiment configuration (TOML).
//!
//! Parsing is strict: unknown keys are errors. [`ExperimentConfig::validate`]
//! collects every cross-field violation, each prefixed by its dotted key, so
//! a bad sweep cell fails before any training starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregatorKind, AggregatorSpec};
use crate::attacks::{AttackConfig, AttackKind};
use crate::data::SynthSpec;
use crate::nn::TrainParams;
use crate::weidetect::default_top_t;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// TOML file describing a [`crate::data::CsvSchema`].
    pub schema: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub synthetic: Option<SynthSpec>,
    pub csv: Option<CsvSource>,
    pub test_fraction: f64,
    /// Dirichlet concentration of the client partition.
    pub eta: f64,
    pub client_count: usize,
    /// Stratified share of the training split held by the server to train
    /// the reference model and build the auxiliary set. Never given to clients.
    pub server_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: None,
            csv: None,
            test_fraction: 0.2,
            eta: 0.4,
            client_count: 20,
            server_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    /// Clients sampled per round; all clients when unset.
    pub clients_per_round: Option<usize>,
    /// Epochs of central training for the server's reference model.
    pub reference_epochs: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            lr: 0.01,
            batch_size: 32,
            local_epochs: 5,
            rounds: 100,
            clients_per_round: None,
            reference_epochs: 30,
        }
    }
}

impl TrainingSection {
    pub fn local_params(&self) -> TrainParams {
        TrainParams {
            lr: self.lr,
            epochs: self.local_epochs,
            batch_size: self.batch_size,
        }
    }

    pub fn reference_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.reference_epochs,
            ..self.local_params()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub target_labels: Vec<usize>,
    pub poison_ratio: f64,
    pub epsilon: f64,
    pub pgd_steps: usize,
    pub pgd_alpha: Option<f64>,
    pub gn_mu: f64,
    pub gn_sigma: f64,
    pub flip_map: Vec<(usize, usize)>,
    /// Share of clients that are compromised, rounded half up.
    pub adversary_fraction: f64,
    /// Explicit compromised client ids; overrides `adversary_fraction`.
    pub adversary_ids: Option<Vec<usize>>,
    pub adversary_placement: AdversaryPlacement,
}

/// Which clients are compromised when ids are not listed explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryPlacement {
    /// Uniformly random clients.
    Random,
    /// Clients holding the most target-class samples (ties to lower id).
    TargetHolders,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            kind: a.kind,
            target_labels: a.target_labels,
            poison_ratio: a.poison_ratio,
            epsilon: a.epsilon,
            pgd_steps: a.pgd_steps,
            pgd_alpha: a.pgd_alpha,
            gn_mu: a.gn_mu,
            gn_sigma: a.gn_sigma,
            flip_map: a.flip_map,
            adversary_fraction: 0.15,
            adversary_ids: None,
            adversary_placement: AdversaryPlacement::Random,
        }
    }
}

impl AttackSection {
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            kind: self.kind,
            target_labels: self.target_labels.clone(),
            poison_ratio: self.poison_ratio,
            epsilon: self.epsilon,
            pgd_steps: self.pgd_steps,
            pgd_alpha: self.pgd_alpha,
            gn_mu: self.gn_mu,
            gn_sigma: self.gn_sigma,
            flip_map: self.flip_map.clone(),
        }
    }

    /// Number of compromised clients out of `client_count`.
    pub fn adversary_count(&self, client_count: usize) -> usize {
        match &self.adversary_ids {
            Some(ids) => ids.len(),
            None if self.kind == AttackKind::None => 0,
            None => crate::data::round_half_up(self.adversary_fraction * client_count as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub kind: AggregatorKind,
    pub f: Option<usize>,
    pub m_select: Option<usize>,
    pub trim_k: Option<usize>,
    /// Models admitted per round by the Weibull filter; `n - n/3` when unset.
    pub top_t: Option<usize>,
    pub floc: f64,
    pub aux_threshold: f64,
    pub aux_volume: f64,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            kind: AggregatorKind::WeiDetect,
            f: None,
            m_select: None,
            trim_k: None,
            top_t: None,
            floc: 0.0,
            aux_threshold: 0.9,
            aux_volume: 1.0,
        }
    }
}

impl DefenseSection {
    pub fn aggregator_spec(&self) -> AggregatorSpec {
        AggregatorSpec {
            kind: self.kind,
            f: self.f,
            m_select: self.m_select,
            trim_k: self.trim_k,
        }
    }

    pub fn top_t(&self, n: usize) -> usize {
        self.top_t.unwrap_or_else(|| default_top_t(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub master: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { master: 1 }
    }
}

/// How `agg_time_s` is written to `rounds.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// Wall-clock seconds.
    Measured,
    /// Always zero, so reruns are byte-identical.
    Suppressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub timing: TimingMode,
    /// Write every round's client and global parameter vectors.
    pub dump_params: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            timing: TimingMode::Measured,
            dump_params: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub training: TrainingSection,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Parses a config file; relative CSV paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(csv), Some(dir)) = (cfg.data.csv.as_mut(), path.parent()) {
            if csv.path.is_relative() {
                csv.path = dir.join(&csv.path);
            }
            if csv.schema.is_relative() {
                csv.schema = dir.join(&csv.schema);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidParameter(format!("toml encode: {e}")))
    }

    pub fn clients_per_round(&self) -> usize {
        self.training
            .clients_per_round
            .unwrap_or(self.data.client_count)
    }

    /// Class count when it is known before loading data.
    pub fn declared_class_count(&self) -> Option<usize> {
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.as_ref().map(|s| s.class_count),
            DataSource::Csv => None,
        }
    }

    /// Every violation found, each as `section.key: message`.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        self.check_data(&mut errs);
        self.check_training(&mut errs);
        self.check_attack(&mut errs);
        self.check_defense(&mut errs);
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Checks that need the class count of the loaded dataset.
    pub fn validate_classes(&self, class_count: usize) -> Result<()> {
        let errs: Vec<String> = self
            .attack
            .attack_config()
            .validate(class_count)
            .into_iter()
            .map(|e| format!("attack.{e}"))
            .collect();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn check_data(&self, errs: &mut Vec<String>) {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => match &d.synthetic {
                None => errs.push("data.synthetic: required when source = \"synthetic\"".into()),
                Some(s) => {
                    if let Err(e) = s.validate() {
                        errs.push(format!("data.synthetic: {e}"));
                    }
                }
            },
            DataSource::Csv => {
                if d.csv.is_none() {
                    errs.push("data.csv: required when source = \"csv\"".into());
                }
            }
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            errs.push(format!("data.test_fraction: must be in (0, 1), got {}", d.test_fraction));
        }
        if !(d.eta.is_finite() && d.eta > 0.0) {
            errs.push(format!("data.eta: must be > 0, got {}", d.eta));
        }
        if d.client_count < 2 {
            errs.push(format!("data.client_count: must be >= 2, got {}", d.client_count));
        }
        if !(d.server_fraction >= 0.0 && d.server_fraction < 1.0) {
            errs.push(format!(
                "data.server_fraction: must be in [0, 1), got {}",
                d.server_fraction
            ));
        }
        if let (DataSource::Synthetic, Some(s)) = (d.source, &d.synthetic) {
            let total: usize = s.per_class_counts.iter().sum();
            let train = (total as f64 * (1.0 - d.test_fraction) * (1.0 - d.server_fraction)) as usize;
            if train < d.client_count {
                errs.push(format!(
                    "data.client_count: about {train} client training samples for {} clients",
                    d.client_count
                ));
            }
        }
    }

    fn check_training(&self, errs: &mut Vec<String>) {
        let t = &self.training;
        if t.hidden.contains(&0) {
            errs.push("training.hidden: every layer width must be >= 1".into());
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            errs.push(format!("training.lr: must be > 0, got {}", t.lr));
        }
        if t.batch_size == 0 {
            errs.push("training.batch_size: must be >= 1".into());
        }
        if t.local_epochs == 0 {
            errs.push("training.local_epochs: must be >= 1".into());
        }
        if t.reference_epochs == 0 {
            errs.push("training.reference_epochs: must be >= 1".into());
        }
        match t.clients_per_round {
            Some(0) => errs.push("training.clients_per_round: must be >= 1".into()),
            Some(m) if m > self.data.client_count => errs.push(format!(
                "training.clients_per_round: {m} exceeds data.client_count {}",
                self.data.client_count
            )),
            _ => {}
        }
    }

    fn check_attack(&self, errs: &mut Vec<String>) {
        let a = &self.attack;
        let n = self.data.client_count;
        if !(a.adversary_fraction >= 0.0 && a.adversary_fraction <= 1.0) {
            errs.push(format!(
                "attack.adversary_fraction: must be in [0, 1], got {}",
                a.adversary_fraction
            ));
        }
        let count = a.adversary_count(n);
        if count > n / 3 {
            errs.push(format!(
                "attack.adversary_fraction: {count} adversaries exceed one third of {n} clients"
            ));
        }
        if let Some(ids) = &a.adversary_ids {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ids.len() {
                errs.push("attack.adversary_ids: duplicate id".into());
            }
            if let Some(bad) = ids.iter().find(|&&i| i >= n) {
                errs.push(format!("attack.adversary_ids: client {bad} out of range (0..{n})"));
            }
        }
        let class_count = self.declared_class_count().unwrap_or(usize::MAX);
        errs.extend(
            a.attack_config()
                .validate(class_count)
                .into_iter()
                .map(|e| format!("attack.{e}")),
        );
    }

    fn check_defense(&self, errs: &mut Vec<String>) {
        let d = &self.defense;
        let m = self.clients_per_round();
        let spec = d.aggregator_spec();
        match d.kind {
            AggregatorKind::Krum | AggregatorKind::MultiKrum => {
                let f = spec.byzantine_count(m);
                if m < 2 * f + 3 {
                    errs.push(format!(
                        "defense.f: krum needs clients_per_round >= 2f + 3, got {m} with f = {f}"
                    ));
                }
                let sel = spec.select_count(m);
                if d.kind == AggregatorKind::MultiKrum && (sel == 0 || sel > m) {
                    errs.push(format!("defense.m_select: must be in 1..={m}, got {sel}"));
                }
            }
            AggregatorKind::TrimmedMean => {
                let k = spec.trim_count(m);
                if 2 * k >= m {
                    errs.push(format!("defense.trim_k: must be < {m}/2, got {k}"));
                }
            }
            AggregatorKind::WeiDetect => {
                let t = d.top_t(m);
                if t == 0 || t > m {
                    errs.push(format!("defense.top_t: must be in 1..={m}, got {t}"));
                }
                if m < 3 {
                    errs.push(format!("defense.kind: weibull fitting needs >= 3 clients per round, got {m}"));
                }
                if self.data.server_fraction <= 0.0 {
                    errs.push("data.server_fraction: must be > 0 for the weidetect defense".into());
                }
            }
            AggregatorKind::FedAvg | AggregatorKind::Median => {}
        }
        if !d.floc.is_finite() || d.floc >= 1.0 {
            errs.push(format!("defense.floc: must be finite and < 1, got {}", d.floc));
        }
        if !(d.aux_threshold > 0.0 && d.aux_threshold < 1.0) {
            errs.push(format!("defense.aux_threshold: must be in (0, 1), got {}", d.aux_threshold));
        }
        if !(d.aux_volume > 0.0 && d.aux_volume <= 1.0) {
            errs.push(format!("defense.aux_volume: must be in (0, 1], got {}", d.aux_volume));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data]
        client_count = 4
        [data.synthetic]
        class_count = 3
        dim = 5
        per_class_counts = [60, 40, 20]
        separation = 6.0
        [training]
        rounds = 2
        [attack]
        kind = "label_flip"
        target_labels = [2]
        flip_map = [[2, 0]]
        adversary_fraction = 0.25
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.training.hidden, vec![64, 32]);
        assert_eq!(cfg.training.lr, 0.01);
        assert_eq!(cfg.training.batch_size, 32);
        assert_eq!(cfg.training.local_epochs, 5);
        assert_eq!(cfg.data.eta, 0.4);
        assert_eq!(cfg.attack.epsilon, 0.35);
        assert_eq!(cfg.attack.flip_map, vec![(2, 0)]);
        assert_eq!(cfg.defense.kind, AggregatorKind::WeiDetect);
        assert_eq!(cfg.defense.aux_threshold, 0.9);
        assert_eq!(cfg.attack.adversary_count(4), 1);
        assert!(cfg.violations().is_empty(), "{:?}", cfg.violations());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("rounds = 2", "roundz = 2");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("roundz"), "{err}");
    }

    #[test]
    fn zero_eta_names_the_field() {
        let text = MINIMAL.replace("client_count = 4", "client_count = 4\neta = 0.0");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let errs = cfg.violations();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].starts_with("data.eta"));
    }

    #[test]
    fn adversary_cap_and_krum_bound() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.attack.adversary_fraction = 0.5;
        cfg.defense.kind = AggregatorKind::Krum;
        cfg.defense.f = Some(1);
        let errs = cfg.violations().join("\n");
        assert!(errs.contains("attack.adversary_fraction"), "{errs}");
        assert!(errs.contains("defense.f"), "{errs}");
    }

    #[test]
    fn attack_fields_are_checked_against_classes() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.attack.target_labels = vec![7];
        let errs = cfg.violations().join("\n");
        assert!(errs.contains("attack.target_labels"), "{errs}");
        assert!(errs.contains("attack.flip_map"), "{errs}");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
