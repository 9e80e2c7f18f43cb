//! Federated averaging with observation and manipulation hooks for a
//! curious server (global role) or a curious participant (local role).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MiaError, Result};
use crate::nn::{Network, OptimizerState};
use crate::rng::{derive_seed, stream};
use crate::snapshot::{write_records, ModelSnapshot};
use crate::target::{evaluate_target, train_epoch, TargetConfig};
use crate::tensor::Tensor;

pub type Params = Vec<Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerRole {
    /// The aggregator, attacking participant `victim`.
    Global { victim: usize },
    /// Participant `attacker`, attacking everybody else.
    Local { attacker: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Passive,
    GradientAscent,
    Isolate,
    IsolateGradientAscent,
}

impl AttackMode {
    pub fn ascends(self) -> bool {
        matches!(self, AttackMode::GradientAscent | AttackMode::IsolateGradientAscent)
    }

    pub fn isolates(self) -> bool {
        matches!(self, AttackMode::Isolate | AttackMode::IsolateGradientAscent)
    }
}

/// Where a global attacker applies gradient ascent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentPlacement {
    /// Only the parameters sent down to the victim.
    #[default]
    Download,
    /// The aggregate itself, so every participant receives it.
    ServerEdit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_participants: usize,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs_per_round: usize,
    /// Rounds (1-based) at which the attacker records what it sees.
    pub observed_rounds: Vec<usize>,
    pub attacker_role: AttackerRole,
    pub attack_mode: AttackMode,
    #[serde(default)]
    pub gamma: f64,
    /// Under isolation, whether the other parties' aggregate still
    /// includes the victim's uploads.
    #[serde(default)]
    pub isolation_includes_victim: bool,
    #[serde(default)]
    pub ascent_placement: AscentPlacement,
    /// Per-participant training indices.
    #[serde(default)]
    pub participant_splits: Vec<Vec<usize>>,
    /// Records the active attacker ascends on.
    #[serde(default)]
    pub target_batch: Vec<usize>,
    /// Held-out records for per-round accuracy.
    #[serde(default)]
    pub test_split: Vec<usize>,
}

fn one() -> usize {
    1
}

impl FedConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let parties = self.num_participants;
        if parties < 2 {
            return Err(MiaError::arg("federated training needs at least 2 participants"));
        }
        if self.participant_splits.len() != parties {
            return Err(MiaError::arg(format!(
                "{} participant splits for {parties} participants",
                self.participant_splits.len()
            )));
        }
        if self.participant_splits.iter().any(Vec::is_empty) {
            return Err(MiaError::arg("every participant needs training data"));
        }
        let all_idx = self
            .participant_splits
            .iter()
            .flatten()
            .chain(&self.target_batch)
            .chain(&self.test_split);
        if all_idx.clone().any(|&i| i >= n) {
            return Err(MiaError::arg("federated index out of dataset range"));
        }
        if self.local_epochs_per_round == 0 {
            return Err(MiaError::arg("local_epochs_per_round must be positive"));
        }
        if self.observed_rounds.windows(2).any(|w| w[0] >= w[1])
            || self.observed_rounds.iter().any(|&r| r == 0 || r > self.rounds)
        {
            return Err(MiaError::arg(format!(
                "observed rounds {:?} must be sorted, unique and within 1..={}",
                self.observed_rounds, self.rounds
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(MiaError::arg("gamma must be finite and non-negative"));
        }
        match self.attacker_role {
            AttackerRole::Global { victim } if victim >= parties => {
                return Err(MiaError::arg(format!("victim {victim} out of range for {parties} participants")))
            }
            AttackerRole::Local { attacker } if attacker >= parties => {
                return Err(MiaError::arg(format!(
                    "attacker {attacker} out of range for {parties} participants"
                )))
            }
            AttackerRole::Local { .. } if self.attack_mode.isolates() => {
                return Err(MiaError::arg("isolation requires the global attacker role"))
            }
            _ => {}
        }
        if self.attack_mode.ascends() && self.target_batch.is_empty() {
            return Err(MiaError::arg("gradient ascent needs a non-empty target batch"));
        }
        Ok(())
    }
}

/// What the attacker saw at one observed round.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    /// Every participant's upload (global role).
    Uploads { round: usize, params: Vec<Params> },
    /// The aggregate broadcast after the round (local role).
    Aggregate { round: usize, params: Params },
}

impl Observation {
    pub fn round(&self) -> usize {
        match self {
            Observation::Uploads { round, .. } | Observation::Aggregate { round, .. } => *round,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationLog {
    pub role: AttackerRole,
    pub arch: Vec<crate::nn::LayerSpec>,
    pub entries: Vec<Observation>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct ManifestEntry {
    pub round: usize,
    pub party: Option<usize>,
    pub file: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct ObservationManifest {
    pub role: AttackerRole,
    pub rounds: Vec<usize>,
    pub files: Vec<ManifestEntry>,
}

impl ObservationLog {
    /// Snapshots the attacker attacks: the victim's uploads for a global
    /// attacker, the aggregates for a local one.
    pub fn target_snapshots(&self) -> Result<Vec<ModelSnapshot>> {
        let party = match self.role {
            AttackerRole::Global { victim } => Some(victim),
            AttackerRole::Local { .. } => None,
        };
        self.snapshots_for(party)
    }

    /// Uploads of `party` (global logs) or the aggregates (`None`).
    pub fn snapshots_for(&self, party: Option<usize>) -> Result<Vec<ModelSnapshot>> {
        self.entries
            .iter()
            .map(|e| {
                let params = match (e, party) {
                    (Observation::Uploads { params, .. }, Some(p)) => params
                        .get(p)
                        .ok_or_else(|| MiaError::arg(format!("no upload for party {p}")))?,
                    (Observation::Aggregate { params, .. }, None) => params,
                    _ => return Err(MiaError::arg("observation kind does not match the request")),
                };
                Ok(ModelSnapshot {
                    epoch: e.round() as u64,
                    params: params.clone(),
                    arch: self.arch.clone(),
                })
            })
            .collect()
    }

    /// Writes one snapshot file per observed round and party plus
    /// `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<ObservationManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for e in &self.entries {
            let round = e.round();
            let parties: Vec<(Option<usize>, &Params)> = match e {
                Observation::Uploads { params, .. } => params.iter().enumerate().map(|(p, v)| (Some(p), v)).collect(),
                Observation::Aggregate { params, .. } => vec![(None, params)],
            };
            for (party, params) in parties {
                let file = match party {
                    Some(p) => format!("round{round:04}_party{p}.snap"),
                    None => format!("round{round:04}_aggregate.snap"),
                };
                let snap = ModelSnapshot {
                    epoch: round as u64,
                    params: params.clone(),
                    arch: self.arch.clone(),
                };
                let tag = party.map_or_else(|| "aggregate".to_string(), |p| format!("party{p}"));
                write_records(dir.join(&file), &[snap.to_record(&tag, String::new())])?;
                files.push(ManifestEntry { round, party, file });
            }
        }
        let manifest = ObservationManifest {
            role: self.role,
            rounds: self.entries.iter().map(Observation::round).collect(),
            files,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub aggregate_test_acc: f64,
    pub victim_train_acc: f64,
}

#[derive(Clone, Debug)]
pub struct FedOutcome {
    pub final_aggregate: ModelSnapshot,
    pub log: ObservationLog,
    pub rounds: Vec<RoundStats>,
    /// Last upload of every participant.
    pub final_uploads: Vec<Params>,
}

/// Parameters sent to every participant plus the aggregate they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Exchange {
    pub aggregate: Params,
    pub downloads: Vec<Params>,
}

/// Element-wise unweighted mean, computed as `u0 + sum(u_i - u0) / N` so
/// that identical uploads average to themselves bit for bit.
pub fn fedavg(uploads: &[&Params]) -> Result<Params> {
    let first = *uploads.first().ok_or_else(|| MiaError::arg("no uploads to average"))?;
    let n = uploads.len() as f64;
    let mut out = first.clone();
    for (j, acc) in out.iter_mut().enumerate() {
        let base = first[j].data();
        let mut delta = vec![0.0; base.len()];
        for u in &uploads[1..] {
            let t = u.get(j).ok_or_else(|| MiaError::dim("uploads differ in tensor count"))?;
            if t.shape() != first[j].shape() {
                return Err(MiaError::dim("uploads differ in tensor shape"));
            }
            delta.iter_mut().zip(t.data().iter().zip(base)).for_each(|(d, (v, b))| *d += v - b);
        }
        acc.data_mut()
            .iter_mut()
            .zip(&delta)
            .for_each(|(a, d)| *a += d / n);
    }
    Ok(out)
}

/// Normal exchange: everyone receives the mean of all uploads.
pub fn exchange(uploads: &[Params]) -> Result<Exchange> {
    let refs: Vec<&Params> = uploads.iter().collect();
    let aggregate = fedavg(&refs)?;
    Ok(Exchange {
        downloads: vec![aggregate.clone(); uploads.len()],
        aggregate,
    })
}

/// Isolating exchange: `victim` gets its own upload back; everyone else
/// gets the mean of the other uploads (or of all uploads when
/// `include_victim`).
pub fn isolate_participant(uploads: &[Params], victim: usize, include_victim: bool) -> Result<Exchange> {
    if victim >= uploads.len() {
        return Err(MiaError::arg(format!(
            "victim {victim} out of range for {} participants",
            uploads.len()
        )));
    }
    let refs: Vec<&Params> = uploads
        .iter()
        .enumerate()
        .filter(|(p, _)| include_victim || *p != victim)
        .map(|(_, u)| u)
        .collect();
    let aggregate = fedavg(&refs)?;
    let downloads = (0..uploads.len())
        .map(|p| if p == victim { uploads[victim].clone() } else { aggregate.clone() })
        .collect();
    Ok(Exchange { aggregate, downloads })
}

/// `params + gamma * sum_x dL(x)/dW` over the target batch: moves the
/// parameters uphill on the targets' loss.
pub fn gradient_ascent_inject(
    arch: &[crate::nn::LayerSpec],
    params: &Params,
    ds: &Dataset,
    batch: &[usize],
    gamma: f64,
) -> Result<Params> {
    if !(gamma >= 0.0) {
        return Err(MiaError::arg("gamma must be non-negative"));
    }
    let net = Network::from_params(arch.to_vec(), params.clone())?;
    let mut out = params.clone();
    if batch.is_empty() {
        return Ok(out);
    }
    let mut total: Option<Vec<Tensor>> = None;
    for chunk in batch.chunks(256) {
        let (x, y) = ds.gather(chunk);
        let cache = net.forward_batch(&x, chunk.len(), None)?;
        let mut dlogits = Vec::with_capacity(cache.output().len());
        for (row, &label) in cache.output().chunks_exact(ds.num_classes).zip(&y) {
            let mut p = crate::nn::softmax(row);
            p[label] -= 1.0;
            dlogits.extend(p);
        }
        let (g, _) = net.backward_batch(&cache, dlogits, false)?;
        match &mut total {
            None => total = Some(g.param_grads),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g.param_grads) {
                    a.axpy(1.0, b)?;
                }
            }
        }
    }
    for (p, g) in out.iter_mut().zip(total.expect("non-empty batch")) {
        p.axpy(gamma, &g)?;
    }
    Ok(out)
}

/// Local training of one participant for one round.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    net: &mut Network,
    opt: &mut OptimizerState,
    ds: &Dataset,
    idx: &[usize],
    epochs: usize,
    batch_size: usize,
    seed: u64,
    party: usize,
    round: usize,
) -> Result<()> {
    for e in 0..epochs {
        let s = derive_seed(seed, &[stream::FED, party as u64, round as u64, e as u64]);
        train_epoch(net, opt, ds, idx, batch_size, s)?;
    }
    Ok(())
}

/// Runs FedAvg for `cfg.rounds` rounds, applying the configured attack.
///
/// Each participant keeps its own optimizer state across rounds and its
/// shuffling stream is keyed by `(seed, participant, round)`.
pub fn run_federated(ds: &Dataset, cfg: &FedConfig, target_cfg: &TargetConfig, seed: u64) -> Result<FedOutcome> {
    cfg.validate(ds.len())?;
    target_cfg.validate(ds)?;
    let arch = target_cfg.arch();
    let init = Network::new(arch.clone(), derive_seed(seed, &[stream::INIT]))?;
    let parties = cfg.num_participants;
    let mut opts: Vec<OptimizerState> = (0..parties).map(|_| target_cfg.optimizer.state()).collect();
    let mut downloads: Vec<Params> = vec![init.params().to_vec(); parties];
    let victim = match cfg.attacker_role {
        AttackerRole::Global { victim } => victim,
        AttackerRole::Local { attacker } => attacker,
    };
    let global = matches!(cfg.attacker_role, AttackerRole::Global { .. });
    let ascend = cfg.attack_mode.ascends() && cfg.gamma > 0.0;
    let inject = |p: &Params| gradient_ascent_inject(&arch, p, ds, &cfg.target_batch, cfg.gamma);

    let mut entries = Vec::new();
    let mut stats = Vec::new();
    let mut uploads: Vec<Params> = Vec::new();
    let mut aggregate = init.params().to_vec();
    for round in 1..=cfg.rounds {
        if global && ascend {
            match cfg.ascent_placement {
                AscentPlacement::Download => downloads[victim] = inject(&downloads[victim])?,
                AscentPlacement::ServerEdit => {
                    for d in downloads.iter_mut() {
                        *d = inject(d)?;
                    }
                }
            }
        }
        uploads = Vec::with_capacity(parties);
        let mut victim_train_acc = 0.0;
        for (p, download) in downloads.iter().enumerate() {
            let mut net = Network::from_params(arch.clone(), download.clone())?;
            train_local(
                &mut net,
                &mut opts[p],
                ds,
                &cfg.participant_splits[p],
                cfg.local_epochs_per_round,
                target_cfg.batch_size,
                seed,
                p,
                round,
            )?;
            if p == victim {
                victim_train_acc = evaluate_target(&net, ds, &cfg.participant_splits[p])?.0;
            }
            let mut up = net.into_params();
            if !global && ascend && p == victim {
                up = inject(&up)?;
            }
            uploads.push(up);
        }
        let ex = if global && cfg.attack_mode.isolates() {
            isolate_participant(&uploads, victim, cfg.isolation_includes_victim)?
        } else {
            exchange(&uploads)?
        };
        aggregate = ex.aggregate;
        downloads = ex.downloads;
        if cfg.observed_rounds.binary_search(&round).is_ok() {
            entries.push(if global {
                Observation::Uploads {
                    round,
                    params: uploads.clone(),
                }
            } else {
                Observation::Aggregate {
                    round,
                    params: aggregate.clone(),
                }
            });
        }
        let agg_net = Network::from_params(arch.clone(), aggregate.clone())?;
        stats.push(RoundStats {
            round,
            aggregate_test_acc: evaluate_target(&agg_net, ds, &cfg.test_split)?.0,
            victim_train_acc,
        });
    }
    Ok(FedOutcome {
        final_aggregate: ModelSnapshot {
            epoch: cfg.rounds as u64,
            params: aggregate,
            arch: arch.clone(),
        },
        log: ObservationLog {
            role: cfg.attacker_role,
            arch,
            entries,
        },
        rounds: stats,
        final_uploads: uploads,
    })
}
