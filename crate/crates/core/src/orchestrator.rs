//! Federated training loop.
//!
//! [`Federation::prepare`] turns a config into fixed client shards, a test
//! split and the server's private slice. Each round samples clients, trains
//! them in parallel from the current global model, applies the configured
//! aggregation rule, and scores the new global model on the test split.
//! Every random draw is keyed by (master seed, purpose, client, round), so
//! results do not depend on worker scheduling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{aggregate, Aggregated, AggregatorKind, AggregatorSpec};
use crate::attacks::{adversarial_client_update, AttackConfig, AttackKind, PoisonAudit};
use crate::config::{AdversaryPlacement, DataSource, ExperimentConfig};
use crate::data::{
    build_auxiliary, dirichlet_partition, load_csv, split, stratified_take, synthesize,
    AuxiliaryDataset, CsvSchema, Dataset, DatasetSummary, PartitionPlan,
};
use crate::metrics::compute_metrics;
use crate::nn::{forward, init_params, sgd_epochs, MlpArchitecture, ParamVector};
use crate::seed;
use crate::weidetect::{aggregate_selected, weibull_filter, ClientModel, DefenseOutcome};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub id: usize,
    pub data: Dataset,
    pub is_adversary: bool,
    pub attack: AttackConfig,
}

/// Mutable part of the federation: the round counter and global model.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub round: usize,
    pub global: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientAudit {
    pub client_id: usize,
    #[serde(flatten)]
    pub audit: PoisonAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub aggregator: AggregatorKind,
    pub attack: AttackKind,
    pub poison_ratio: f64,
    pub global_f1: f64,
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    /// Recall of the target class, or the mean over several targets.
    pub tcr: Option<f64>,
    pub sampled_ids: Vec<usize>,
    pub selected_ids: Vec<usize>,
    pub rejected_ids: Vec<usize>,
    /// Wall-clock seconds spent in the server step, excluding client training.
    pub agg_time_s: f64,
    pub defense: Option<DefenseOutcome>,
    pub poison_audits: Vec<ClientAudit>,
}

impl RoundReport {
    /// Equality ignoring the wall-clock field. Compares serialised forms so
    /// that NaN fields of a degenerate fit compare equal.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.agg_time_s = other.agg_time_s;
        match (serde_json::to_string(&a), serde_json::to_string(other)) {
            (Ok(x), Ok(y)) => x == y,
            _ => false,
        }
    }
}

/// Parameters produced during one round, for optional dumping.
#[derive(Debug, Clone, Copy)]
pub struct RoundParams<'a> {
    pub round: usize,
    pub global: &'a ParamVector,
    pub clients: &'a [ClientModel],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub rounds: usize,
    pub best_f1: Option<f64>,
    pub final_f1: Option<f64>,
    pub best_tcr: Option<f64>,
    pub final_tcr: Option<f64>,
}

pub fn summarize(reports: &[RoundReport]) -> ExperimentSummary {
    let max = |it: &mut dyn Iterator<Item = f64>| it.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    ExperimentSummary {
        rounds: reports.len(),
        best_f1: max(&mut reports.iter().map(|r| r.global_f1)),
        final_f1: reports.last().map(|r| r.global_f1),
        best_tcr: max(&mut reports.iter().filter_map(|r| r.tcr)),
        final_tcr: reports.last().and_then(|r| r.tcr),
    }
}

/// Static setup of one experiment: data, shards, adversaries and the
/// server's private instruments.
#[derive(Debug, Clone)]
pub struct Federation {
    pub config: ExperimentConfig,
    pub arch: MlpArchitecture,
    pub dataset: DatasetSummary,
    pub test: Dataset,
    /// Slice of the training split held back for the server.
    pub server: Option<Dataset>,
    pub clients: Vec<ClientShard>,
    pub partition: PartitionPlan,
    pub adversary_ids: Vec<usize>,
    /// Attack with defaults (such as the flip map) filled in.
    pub attack: AttackConfig,
    pub reference: Option<ParamVector>,
    pub aux: Option<AuxiliaryDataset>,
    pub warnings: Vec<String>,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let spec = cfg
                .data
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::Config(vec!["data.synthetic: missing".into()]))?;
            synthesize(spec, seed::derive(cfg.seeds.master, "synth", &[]))
        }
        DataSource::Csv => {
            let src = cfg
                .data
                .csv
                .as_ref()
                .ok_or_else(|| Error::Config(vec!["data.csv: missing".into()]))?;
            let schema = CsvSchema::from_toml_file(&src.schema)?;
            load_csv(&src.path, &schema)
        }
    }
}

/// For each source class, the other class receiving the most predicted
/// probability mass from the reference model on the source's samples.
pub fn most_confused_destinations(
    reference: &ParamVector,
    data: &Dataset,
    sources: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let probs = forward(reference, &data.batch())?;
    let k = data.class_count();
    sources
        .iter()
        .map(|&src| {
            let mut mass = vec![0.0; k];
            for (row, &y) in probs.iter_rows().zip(data.labels()) {
                if y == src {
                    for (m, p) in mass.iter_mut().zip(row) {
                        *m += p;
                    }
                }
            }
            let dst = (0..k)
                .filter(|&c| c != src)
                .fold(None, |best: Option<usize>, c| match best {
                    Some(b) if mass[b] >= mass[c] => Some(b),
                    _ => Some(c),
                })
                .ok_or_else(|| Error::InvalidParameter("label flipping needs two classes".into()))?;
            Ok((src, dst))
        })
        .collect()
}

fn pick_adversaries(cfg: &ExperimentConfig, shards: &[Dataset]) -> Vec<usize> {
    let n = cfg.data.client_count;
    let count = cfg.attack.adversary_count(n);
    let mut ids = match (&cfg.attack.adversary_ids, cfg.attack.adversary_placement) {
        (Some(ids), _) => ids.clone(),
        (None, AdversaryPlacement::Random) => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut seed::rng(seed::derive(cfg.seeds.master, "adversaries", &[])));
            all.truncate(count);
            all
        }
        (None, AdversaryPlacement::TargetHolders) => {
            let held: Vec<usize> = shards
                .iter()
                .map(|s| {
                    let hist = s.class_histogram();
                    cfg.attack.target_labels.iter().map(|&c| hist[c]).sum()
                })
                .collect();
            let mut all: Vec<usize> = (0..n).collect();
            all.sort_by(|&a, &b| held[b].cmp(&held[a]).then(a.cmp(&b)));
            all.truncate(count);
            all
        }
    };
    ids.sort_unstable();
    ids
}

impl Federation {
    /// Validates `cfg`, loads or synthesises the data and builds all shards.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = load_dataset(cfg)?;
        Self::from_dataset(cfg, dataset)
    }

    pub fn from_dataset(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        cfg.validate_classes(dataset.class_count())?;
        let master = cfg.seeds.master;
        let summary = dataset.summary();
        let arch = MlpArchitecture::new(
            dataset.dim(),
            cfg.training.hidden.clone(),
            dataset.class_count(),
        )?;

        let parts = split(&dataset, cfg.data.test_fraction, seed::derive(master, "split", &[]))?;
        let mut warnings = parts.warnings;
        let (server, pool) = if cfg.data.server_fraction > 0.0 {
            let (taken, rest, w) = stratified_take(
                &parts.train,
                cfg.data.server_fraction,
                seed::derive(master, "server", &[]),
            );
            warnings.extend(w);
            let server = (!taken.is_empty()).then(|| parts.train.subset(&taken));
            (server, parts.train.subset(&rest))
        } else {
            (None, parts.train)
        };

        let partition = dirichlet_partition(
            &pool,
            cfg.data.eta,
            cfg.data.client_count,
            seed::derive(master, "partition", &[]),
        )?;

        let mut attack = cfg.attack.attack_config();
        let needs_flip_map = attack.kind == AttackKind::LabelFlip && attack.flip_map.is_empty();
        let needs_reference = cfg.defense.kind == AggregatorKind::WeiDetect || needs_flip_map;
        let reference = match (&server, needs_reference) {
            (Some(s), true) => {
                let init = init_params(&arch, seed::derive(master, "reference-init", &[]));
                Some(sgd_epochs(
                    &init,
                    &s.batch(),
                    &cfg.training.reference_params(),
                    seed::derive(master, "reference", &[]),
                )?)
            }
            (None, true) => {
                return Err(Error::Config(vec![
                    "data.server_fraction: the server slice is empty but the defense or flip map needs it"
                        .into(),
                ]))
            }
            _ => None,
        };
        if needs_flip_map {
            let (r, s) = (reference.as_ref(), server.as_ref());
            attack.flip_map =
                most_confused_destinations(r.expect("reference"), s.expect("server"), &attack.target_labels)?;
        }

        let aux = match (cfg.defense.kind, &reference, &server) {
            (AggregatorKind::WeiDetect, Some(r), Some(s)) => {
                let aux = build_auxiliary(
                    r,
                    s,
                    cfg.defense.aux_threshold,
                    cfg.defense.aux_volume,
                    seed::derive(master, "aux", &[]),
                )?;
                warnings.extend(aux.warnings.iter().cloned());
                Some(aux)
            }
            _ => None,
        };

        let shards: Vec<Dataset> = (0..cfg.data.client_count)
            .map(|id| pool.subset(partition.shard(id)))
            .collect();
        let adversary_ids = pick_adversaries(cfg, &shards);
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, data)| ClientShard {
                id,
                data,
                is_adversary: adversary_ids.binary_search(&id).is_ok(),
                attack: attack.clone(),
            })
            .collect();

        Ok(Self {
            config: cfg.clone(),
            arch,
            dataset: summary,
            test: parts.test,
            server,
            clients,
            partition,
            adversary_ids,
            attack,
            reference,
            aux,
            warnings,
        })
    }

    pub fn initial_state(&self) -> FederationState {
        FederationState {
            round: 0,
            global: init_params(&self.arch, seed::derive(self.config.seeds.master, "init", &[])),
        }
    }

    fn sample_clients(&self, round: usize) -> Vec<usize> {
        let n = self.clients.len();
        let m = self.config.clients_per_round();
        let mut ids: Vec<usize> = (0..n).collect();
        if m < n {
            let seed = seed::derive(self.config.seeds.master, "sample", &[round as u64]);
            ids.shuffle(&mut seed::rng(seed));
            ids.truncate(m);
            ids.sort_unstable();
        }
        ids
    }

    fn local_update(
        &self,
        global: &ParamVector,
        shard: &ClientShard,
        round: usize,
    ) -> Result<(ParamVector, Option<PoisonAudit>)> {
        let hp = self.config.training.local_params();
        let seed = seed::derive(
            self.config.seeds.master,
            "local",
            &[shard.id as u64, round as u64],
        );
        if shard.is_adversary {
            let up = adversarial_client_update(global, &shard.data, &shard.attack, &hp, seed)?;
            Ok((up.params, up.audit))
        } else {
            Ok((sgd_epochs(global, &shard.data.batch(), &hp, seed)?, None))
        }
    }

    /// Server step over the round's client models: WeiDetect filtering or a
    /// baseline rule. Returns the new global model, the admitted client ids
    /// and the defense log.
    fn server_step(
        &self,
        models: &[ClientModel],
    ) -> Result<(ParamVector, Vec<usize>, Option<DefenseOutcome>)> {
        let d = &self.config.defense;
        if d.kind == AggregatorKind::WeiDetect {
            let aux = self.aux.as_ref().ok_or(Error::EmptyAuxiliary)?;
            let outcome = weibull_filter(models, aux, d.top_t(models.len()), d.floc)?;
            let params = aggregate_selected(models, &outcome.selection)?;
            let ids = outcome.selection.benign_ids.clone();
            Ok((params, ids, Some(outcome)))
        } else {
            let updates: Vec<ParamVector> = models.iter().map(|m| m.params.clone()).collect();
            let Aggregated { params, selected } = aggregate(&d.aggregator_spec(), &updates)?;
            let ids = selected.iter().map(|&i| models[i].client_id).collect();
            Ok((params, ids, None))
        }
    }

    /// One federated round from `state`. The caller receives the next state,
    /// the report and every client model trained this round.
    pub fn run_round(
        &self,
        state: &FederationState,
    ) -> Result<(FederationState, RoundReport, Vec<ClientModel>)> {
        let round = state.round + 1;
        let abort = |e: Error| Error::RoundAborted {
            round,
            source: Box::new(e),
        };
        let sampled = self.sample_clients(round);
        let trained: Vec<(ParamVector, Option<PoisonAudit>)> = sampled
            .par_iter()
            .map(|&id| self.local_update(&state.global, &self.clients[id], round))
            .collect::<Result<_>>()
            .map_err(abort)?;

        let mut models = Vec::with_capacity(trained.len());
        let mut poison_audits = Vec::new();
        for (&client_id, (params, audit)) in sampled.iter().zip(trained) {
            if let Some(audit) = audit {
                poison_audits.push(ClientAudit { client_id, audit });
            }
            models.push(ClientModel { client_id, params });
        }

        let start = Instant::now();
        let (global, mut selected_ids, defense) = self.server_step(&models).map_err(abort)?;
        let agg_time_s = start.elapsed().as_secs_f64();
        if !global.is_finite() {
            return Err(abort(Error::NonFinite("aggregation")));
        }
        selected_ids.sort_unstable();
        let rejected_ids = sampled
            .iter()
            .copied()
            .filter(|id| selected_ids.binary_search(id).is_err())
            .collect();

        let metrics =
            compute_metrics(&global, &self.test, &self.attack.target_labels).map_err(abort)?;
        let report = RoundReport {
            round,
            aggregator: self.config.defense.kind,
            attack: self.attack.kind,
            poison_ratio: self.attack.poison_ratio,
            global_f1: metrics.macro_f1,
            accuracy: metrics.accuracy,
            per_class_recall: metrics.per_class_recall,
            tcr: metrics.tcr,
            sampled_ids: sampled,
            selected_ids,
            rejected_ids,
            agg_time_s,
            defense,
            poison_audits,
        };
        Ok((FederationState { round, global }, report, models))
    }

    /// Runs every configured round, handing each report to `on_round` as
    /// soon as it is ready. Returns the reports and the final state.
    pub fn run<F>(&self, mut on_round: F) -> Result<(Vec<RoundReport>, FederationState)>
    where
        F: FnMut(&RoundReport, RoundParams<'_>) -> Result<()>,
    {
        let mut state = self.initial_state();
        let mut reports = Vec::with_capacity(self.config.training.rounds);
        for _ in 0..self.config.training.rounds {
            let (next, report, models) = self.run_round(&state)?;
            on_round(
                &report,
                RoundParams {
                    round: next.round,
                    global: &next.global,
                    clients: &models,
                },
            )?;
            reports.push(report);
            state = next;
        }
        Ok((reports, state))
    }
}

/// Prepares and runs `cfg` without callbacks.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<RoundReport>, FederationState)> {
    Federation::prepare(cfg)?.run(|_, _| Ok(()))
}

/// Wall-clock seconds of one baseline aggregation call.
pub fn time_aggregation(spec: &AggregatorSpec, updates: &[ParamVector]) -> Result<f64> {
    let start = Instant::now();
    aggregate(spec, updates)?;
    Ok(start.elapsed().as_secs_f64())
}
