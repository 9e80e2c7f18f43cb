//! Config-driven end-to-end experiments and the shipped presets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{
    cluster_membership, train_supervised, train_unsupervised, write_scores_csv, AttackArch, AttackTrainConfig,
    Knowledge,
};
use crate::data::{
    draw_attack_sets, load_csv, make_fed_split, make_split, synth_purchase_like, CsvSchema, Dataset, FedSplitSizes,
    SplitPlan, SplitSizes,
};
use crate::error::{MiaError, Result};
use crate::features::{write_feature_dump, AttackFeatures, FeatureExtractor, FeatureSelection};
use crate::fed::{run_federated, AscentPlacement, AttackMode, AttackerRole, FedConfig, FedOutcome, RoundStats};
use crate::metrics::{config_hash, evaluate, grad_norm_report, norm_samples, EvalResult, Separation};
use crate::nn::OptimizerConfig;
use crate::rng::{derive_seed, rng_for, stream};
use crate::snapshot::ModelSnapshot;
use crate::target::{finetune_partition, finetune_target, train_target, TargetConfig, TrainedTarget};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Standalone,
    Finetune,
    Federated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveKind {
    GradientAscent,
    Isolate,
    Both,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attacker {
    #[default]
    Passive,
    Active(ActiveKind),
}

/// Where a federated attacker sits: the server, or participant `id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Global,
    Local(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Clustered binary records; see [`synth_purchase_like`].
    Synthetic {
        n: usize,
        dim: usize,
        classes: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic {
                n,
                dim,
                classes,
                spread,
            } => synth_purchase_like(*n, *dim, *classes, *spread, derive_seed(seed, &[stream::DATA])),
            DatasetSpec::Csv { path, schema } => load_csv(path, schema),
        }
    }
}

/// Which stand-alone snapshot is attacked when no snapshot epochs are set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackedModel {
    /// The epoch with the best test accuracy.
    #[default]
    Best,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSettings {
    /// Share of the training set the base model is trained on; the rest is
    /// the fine-tune set.
    pub base_fraction: f64,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            base_fraction: 0.6,
            epochs: 20,
            optimizer: OptimizerConfig::adam(0.001),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedSettings {
    pub num_participants: usize,
    pub per_participant: usize,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs_per_round: usize,
    pub observed_rounds: Vec<usize>,
    /// Participant attacked by a global attacker.
    #[serde(default)]
    pub victim: usize,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub isolation_includes_victim: bool,
    #[serde(default)]
    pub ascent_placement: AscentPlacement,
    #[serde(default)]
    pub overlap_pool: Option<usize>,
}

fn one() -> usize {
    1
}

/// A family of runs sharing one config except for the swept field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Federated only: one run per observed-round set.
    ObservedRounds(Vec<Vec<usize>>),
    /// Target training size (stand-alone, fine-tune) or per-participant
    /// share (federated).
    TrainSize(Vec<usize>),
}

fn default_bins() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: Scenario,
    #[serde(default)]
    pub attacker: Attacker,
    /// Federated only; `None` means global.
    #[serde(default)]
    pub placement: Option<Placement>,
    pub knowledge: Knowledge,
    #[serde(default)]
    pub features: FeatureSelection,
    pub dataset: DatasetSpec,
    /// In the federated scenario `target_train` is unused; the test and
    /// attack sizes apply to the attacked party.
    pub split: SplitSizes,
    /// In the federated scenario only the architecture, optimizer and batch
    /// size are used.
    pub target: TargetConfig,
    #[serde(default)]
    pub attacked_model: AttackedModel,
    #[serde(default)]
    pub finetune: FinetuneSettings,
    #[serde(default)]
    pub fed: Option<FedSettings>,
    #[serde(default)]
    pub attack_arch: AttackArch,
    #[serde(default)]
    pub attack_train: AttackTrainConfig,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default = "default_bins")]
    pub grad_norm_bins: usize,
    pub seed: u64,
    /// Artifacts are written here; nothing is written when unset.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dump_features: bool,
}

fn invariant(name: &str, detail: impl std::fmt::Display) -> MiaError {
    MiaError::Config(format!("{name}: {detail}"))
}

fn as_config(e: MiaError) -> MiaError {
    match e {
        MiaError::Config(_) => e,
        other => MiaError::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let fed = self.scenario == Scenario::Federated;
        if let Attacker::Active(_) = self.attacker {
            if !fed {
                return Err(invariant(
                    "active requires federated",
                    format!("scenario is {:?}", self.scenario),
                ));
            }
        }
        if self.placement.is_some() && !fed {
            return Err(invariant(
                "placement requires federated",
                format!("scenario is {:?}", self.scenario),
            ));
        }
        if fed && self.fed.is_none() {
            return Err(invariant("federated requires fed settings", "`fed` is missing"));
        }
        if !fed && self.fed.is_some() {
            return Err(invariant("fed settings require federated", format!("scenario is {:?}", self.scenario)));
        }
        if fed && !self.target.snapshot_epochs.is_empty() {
            return Err(invariant(
                "federated observes rounds",
                "use fed.observed_rounds instead of target.snapshot_epochs",
            ));
        }
        if let (Some(Placement::Local(_)), Attacker::Active(ActiveKind::Isolate | ActiveKind::Both)) =
            (self.placement, self.attacker)
        {
            return Err(invariant("isolation requires global placement", "placement is local"));
        }
        if self.scenario == Scenario::Finetune {
            let f = self.finetune.base_fraction;
            if !(f > 0.0 && f < 1.0) {
                return Err(invariant("fine-tune fraction in (0, 1)", f));
            }
            if self.finetune.epochs == 0 {
                return Err(invariant("fine-tune epochs positive", 0));
            }
            self.finetune.optimizer.validate().map_err(as_config)?;
        }
        match &self.sweep {
            Some(Sweep::ObservedRounds(sets)) => {
                if !fed {
                    return Err(invariant(
                        "observed-round sweep requires federated",
                        format!("scenario is {:?}", self.scenario),
                    ));
                }
                if sets.is_empty() {
                    return Err(invariant("sweep lists at least one value", "empty sweep"));
                }
            }
            Some(Sweep::TrainSize(sizes)) if sizes.is_empty() => {
                return Err(invariant("sweep lists at least one value", "empty sweep"));
            }
            _ => {}
        }
        if self.grad_norm_bins == 0 {
            return Err(invariant("grad_norm_bins positive", 0));
        }
        self.features.validate().map_err(as_config)?;
        self.attack_arch.validate().map_err(as_config)?;
        self.attack_train.validate().map_err(as_config)
    }
}

impl ExperimentConfig {
    /// Hash of the config with `output_dir` cleared, so relocating the
    /// artifacts keeps the hash.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        config_hash(&c)
    }

    /// One `(label, config)` per run; a single `("main", self)` without a
    /// sweep.
    pub fn variants(&self) -> Vec<(String, ExperimentConfig)> {
        let mut base = self.clone();
        base.sweep = None;
        match &self.sweep {
            None => vec![("main".to_string(), base)],
            Some(Sweep::ObservedRounds(sets)) => sets
                .iter()
                .map(|set| {
                    let mut c = base.clone();
                    if let Some(f) = c.fed.as_mut() {
                        f.observed_rounds = set.clone();
                    }
                    let label = set.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
                    (format!("observed_{label}"), c)
                })
                .collect(),
            Some(Sweep::TrainSize(sizes)) => sizes
                .iter()
                .map(|&n| {
                    let mut c = base.clone();
                    match c.fed.as_mut() {
                        Some(f) => f.per_participant = n,
                        None => c.split.target_train = n,
                    }
                    (format!("train_{n}"), c)
                })
                .collect(),
        }
    }

    fn fed_split_sizes(&self, f: &FedSettings) -> FedSplitSizes {
        FedSplitSizes {
            num_participants: f.num_participants,
            per_participant: f.per_participant,
            target_test: self.split.target_test,
            attack_train_members: self.split.attack_train_members,
            attack_train_nonmembers: self.split.attack_train_nonmembers,
            attack_test_members: self.split.attack_test_members,
            attack_test_nonmembers: self.split.attack_test_nonmembers,
            overlap_pool: f.overlap_pool,
        }
    }

    /// Checks that need the dataset; every failure is a config error.
    pub fn check_feasible(&self, ds: &Dataset) -> Result<()> {
        self.target.validate(ds).map_err(as_config)?;
        match self.scenario {
            Scenario::Standalone => {
                make_split(ds.len(), &self.split, self.seed).map_err(as_config)?;
            }
            Scenario::Finetune => {
                let plan = make_split(ds.len(), &self.split, self.seed).map_err(as_config)?;
                let (d, delta) = finetune_partition(&plan.target_train, self.finetune.base_fraction);
                let need = self.split.attack_train_members + self.split.attack_test_members;
                if need > d.len().min(delta.len()) {
                    return Err(invariant(
                        "fine-tune attack sets fit",
                        format!(
                            "each pool needs {need} members but the base set has {} and the fine-tune set {}",
                            d.len(),
                            delta.len()
                        ),
                    ));
                }
            }
            Scenario::Federated => {
                let f = self.fed.as_ref().expect("validated");
                let sizes = self.fed_split_sizes(f);
                let plan = make_fed_split(ds.len(), &sizes, self.seed).map_err(as_config)?;
                let members = self.member_pool(f, &plan)?;
                let sets = draw_attack_sets(&members, &plan.outside, &sizes, self.seed).map_err(as_config)?;
                self.fed_config(f, &plan, self.ascent_batch(&sets))?
                    .validate(ds.len())
                    .map_err(as_config)?;
            }
        }
        Ok(())
    }

    fn placement(&self) -> Placement {
        self.placement.unwrap_or(Placement::Global)
    }

    fn attack_mode(&self) -> AttackMode {
        match self.attacker {
            Attacker::Passive => AttackMode::Passive,
            Attacker::Active(ActiveKind::GradientAscent) => AttackMode::GradientAscent,
            Attacker::Active(ActiveKind::Isolate) => AttackMode::Isolate,
            Attacker::Active(ActiveKind::Both) => AttackMode::IsolateGradientAscent,
        }
    }

    /// Records whose membership the attacker infers: the victim's share
    /// (global) or everyone else's (local).
    fn member_pool(&self, f: &FedSettings, plan: &crate::data::FedSplitPlan) -> Result<Vec<usize>> {
        match self.placement() {
            Placement::Global => plan
                .participants
                .get(f.victim)
                .cloned()
                .ok_or_else(|| invariant("victim is a participant", f.victim)),
            Placement::Local(a) => {
                if a >= plan.participants.len() {
                    return Err(invariant("local attacker is a participant", a));
                }
                let mut m: Vec<usize> = plan
                    .participants
                    .iter()
                    .enumerate()
                    .filter(|&(p, _)| p != a)
                    .flat_map(|(_, s)| s.iter().copied())
                    .collect();
                m.sort_unstable();
                m.dedup();
                Ok(m)
            }
        }
    }

    /// Every attack candidate when the attacker ascends, else nothing.
    fn ascent_batch(&self, plan: &SplitPlan) -> Vec<usize> {
        if !self.attack_mode().ascends() {
            return Vec::new();
        }
        plan.attack_train_members
            .iter()
            .chain(&plan.attack_train_nonmembers)
            .chain(&plan.attack_test_members)
            .chain(&plan.attack_test_nonmembers)
            .copied()
            .collect()
    }

    fn fed_config(&self, f: &FedSettings, plan: &crate::data::FedSplitPlan, target_batch: Vec<usize>) -> Result<FedConfig> {
        let attacker_role = match self.placement() {
            Placement::Global => AttackerRole::Global { victim: f.victim },
            Placement::Local(attacker) => AttackerRole::Local { attacker },
        };
        Ok(FedConfig {
            num_participants: f.num_participants,
            rounds: f.rounds,
            local_epochs_per_round: f.local_epochs_per_round,
            observed_rounds: f.observed_rounds.clone(),
            attacker_role,
            attack_mode: self.attack_mode(),
            gamma: f.gamma,
            isolation_includes_victim: f.isolation_includes_victim,
            ascent_placement: f.ascent_placement,
            participant_splits: plan.participants.clone(),
            target_batch,
            test_split: plan.target_test.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub attacked_epoch: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub gap: f64,
    /// Loss on the fine-tune set before and after fine-tuning.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub finetune_loss: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub threshold: f64,
    pub upper_is_member: bool,
    pub within_sse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Which two record groups the attack separates.
    pub name: String,
    pub knowledge: Knowledge,
    pub eval: EvalResult,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cluster: Option<ClusterReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub observed_epochs: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<TargetReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fed_rounds: Option<Vec<RoundStats>>,
    pub attacks: Vec<AttackReport>,
    pub grad_norm_separation: Vec<Separation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub scenario: Scenario,
    pub config_hash: String,
    pub seed: u64,
    pub runs: Vec<RunSummary>,
}

impl ExperimentSummary {
    /// The single run of an experiment without a sweep.
    pub fn main(&self) -> &RunSummary {
        &self.runs[0]
    }
}

/// Validates, then runs every variant of `cfg` and writes the artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let ds = cfg.dataset.load(cfg.seed).map_err(|e| e.in_stage("dataset"))?;
    run_experiment_on(&ds, cfg)
}

/// [`run_experiment`] on an already loaded dataset.
pub fn run_experiment_on(ds: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let variants = cfg.variants();
    for (_, v) in &variants {
        v.check_feasible(ds)?;
    }
    let mut runs = Vec::with_capacity(variants.len());
    for (label, v) in &variants {
        let out = cfg.output_dir.as_ref().map(|d| {
            if cfg.sweep.is_some() {
                d.join(label)
            } else {
                d.clone()
            }
        });
        if let Some(dir) = &out {
            fs::create_dir_all(dir).map_err(|e| MiaError::from(e).in_stage("output"))?;
        }
        let run = match v.scenario {
            Scenario::Standalone => run_standalone(ds, v, out.as_deref()),
            Scenario::Finetune => run_finetune(ds, v, out.as_deref()),
            Scenario::Federated => run_fed(ds, v, out.as_deref()),
        }?;
        runs.push(RunSummary {
            label: label.clone(),
            ..run
        });
    }
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        scenario: cfg.scenario,
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        runs,
    };
    if let Some(dir) = &cfg.output_dir {
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)
            .map_err(|e| MiaError::from(e).in_stage("output"))?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)
            .map_err(|e| MiaError::from(e).in_stage("output"))?;
    }
    Ok(summary)
}

fn stage(name: &'static str) -> impl Fn(MiaError) -> MiaError {
    move |e| e.in_stage(name)
}

/// Snapshots of a stand-alone target the attacker observes.
pub fn attacked_snapshots(cfg: &ExperimentConfig, t: &TrainedTarget) -> Vec<ModelSnapshot> {
    if !cfg.target.snapshot_epochs.is_empty() {
        return t.snapshots.clone();
    }
    vec![match cfg.attacked_model {
        AttackedModel::Best => t.best.clone(),
        AttackedModel::Last => t.last.clone(),
    }]
}

fn target_report(t: &TrainedTarget, epoch: u64) -> TargetReport {
    let s = t.stats(epoch);
    TargetReport {
        attacked_epoch: epoch,
        train_acc: s.train_acc,
        test_acc: s.test_acc,
        gap: s.train_acc - s.test_acc,
        finetune_loss: None,
    }
}

fn save_snapshots(dir: &Path, name: &str, snaps: &[ModelSnapshot]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in snaps {
        s.save(dir.join(format!("{name}_e{:04}.snap", s.epoch)))?;
    }
    Ok(())
}

/// Features of one group of records.
struct Group<'a> {
    ids: &'a [usize],
    feats: Vec<AttackFeatures>,
}

fn extract<'a>(ex: &FeatureExtractor, ds: &Dataset, ids: &'a [usize]) -> Result<Group<'a>> {
    Ok(Group {
        ids,
        feats: ex.extract_many(ds, ids).map_err(|e| e.in_stage("features"))?,
    })
}

fn dump(out: Option<&Path>, cfg: &ExperimentConfig, name: &str, g: &Group) -> Result<()> {
    if let (Some(dir), true) = (out, cfg.dump_features) {
        let rows: Vec<(usize, &AttackFeatures)> = g.ids.iter().copied().zip(&g.feats).collect();
        write_feature_dump(dir.join(format!("features_{name}.csv")), &rows).map_err(|e| e.in_stage("output"))?;
    }
    Ok(())
}

/// Trains one attack telling `pos` (label member) from `neg` and scores
/// the held-out groups.
fn attack_pair(
    cfg: &ExperimentConfig,
    name: &str,
    key: u64,
    (train_pos, train_neg): (&Group, &Group),
    (test_pos, test_neg): (&Group, &Group),
    out: Option<&Path>,
) -> Result<AttackReport> {
    let seed = derive_seed(cfg.seed, &[stream::ATTACK, key]);
    let test: Vec<AttackFeatures> = test_pos.feats.iter().chain(&test_neg.feats).cloned().collect();
    let truth: Vec<bool> = (0..test.len()).map(|i| i < test_pos.feats.len()).collect();
    let (net, scores, threshold, best_epoch, cluster) = match cfg.knowledge {
        Knowledge::Supervised => {
            let r = train_supervised(
                &cfg.attack_arch,
                &train_pos.feats,
                &train_neg.feats,
                &test_pos.feats,
                &test_neg.feats,
                &cfg.attack_train,
                seed,
            )
            .map_err(stage("attack"))?;
            let scores = r.net.scores(&test).map_err(stage("attack"))?;
            (r.net, scores, 0.5, Some(r.best_epoch), None)
        }
        Knowledge::Unsupervised => {
            let pool: Vec<AttackFeatures> = train_pos.feats.iter().chain(&train_neg.feats).cloned().collect();
            let r = train_unsupervised(&cfg.attack_arch, &pool, &cfg.attack_train, seed).map_err(stage("attack"))?;
            let raw = r.net.scores(&test).map_err(stage("attack"))?;
            let norms: Vec<f64> = test
                .iter()
                .map(|f| f.diagnostics.last().map_or(0.0, |d| d.grad_norm))
                .collect();
            let c = cluster_membership(&raw, &norms).map_err(stage("cluster"))?;
            // orient scores so that higher means member
            let (scores, threshold) = if c.upper_is_member {
                (raw, c.threshold)
            } else {
                (raw.iter().map(|s| -s).collect(), -c.threshold)
            };
            let report = ClusterReport {
                threshold: c.threshold,
                upper_is_member: c.upper_is_member,
                within_sse: c.within_sse,
            };
            (r.net, scores, threshold, None, Some(report))
        }
    };
    let eval = evaluate(&scores, &truth, threshold).map_err(stage("evaluate"))?;
    if let Some(dir) = out {
        let rows: Vec<(usize, f64, Option<bool>)> = test_pos
            .ids
            .iter()
            .chain(test_neg.ids)
            .zip(&scores)
            .zip(&truth)
            .map(|((&id, &s), &t)| (id, s, Some(t)))
            .collect();
        write_scores_csv(dir.join(format!("scores_{name}.csv")), &rows).map_err(stage("output"))?;
        net.save(dir.join(format!("attack_{name}.snap"))).map_err(stage("output"))?;
    }
    Ok(AttackReport {
        name: name.to_string(),
        knowledge: cfg.knowledge,
        eval,
        best_epoch,
        cluster,
    })
}

fn norm_separation(cfg: &ExperimentConfig, members: &Group, nonmembers: &Group, out: Option<&Path>) -> Result<Vec<Separation>> {
    let mut samples = norm_samples(&members.feats, true);
    samples.extend(norm_samples(&nonmembers.feats, false));
    let report = grad_norm_report(&samples, cfg.grad_norm_bins).map_err(stage("grad_norms"))?;
    if let Some(dir) = out {
        report.write_csv(dir.join("grad_norms.csv")).map_err(stage("output"))?;
    }
    Ok(report.separation)
}

fn run_standalone(ds: &Dataset, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    let plan = make_split(ds.len(), &cfg.split, cfg.seed).map_err(stage("split"))?;
    let trained = train_target(ds, &plan, &cfg.target, cfg.seed).map_err(stage("target"))?;
    let snaps = attacked_snapshots(cfg, &trained);
    let epoch = snaps.last().expect("at least one snapshot").epoch;
    if let Some(dir) = out {
        save_snapshots(&dir.join("snapshots"), "target", &snaps).map_err(stage("output"))?;
    }
    observe_and_attack(ds, cfg, &snaps, &plan, out, Some(target_report(&trained, epoch)), None)
}

/// Extracts features of the four attack groups from `snaps`, trains and
/// evaluates the attack, and reports gradient-norm separation.
pub fn observe_and_attack(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    snaps: &[ModelSnapshot],
    plan: &SplitPlan,
    out: Option<&Path>,
    target: Option<TargetReport>,
    fed_rounds: Option<Vec<RoundStats>>,
) -> Result<RunSummary> {
    let ex = FeatureExtractor::new(snaps, cfg.features.clone()).map_err(stage("features"))?;
    let tm = extract(&ex, ds, &plan.attack_train_members)?;
    let tn = extract(&ex, ds, &plan.attack_train_nonmembers)?;
    let sm = extract(&ex, ds, &plan.attack_test_members)?;
    let sn = extract(&ex, ds, &plan.attack_test_nonmembers)?;
    for (name, g) in [("train_members", &tm), ("train_nonmembers", &tn), ("test_members", &sm), ("test_nonmembers", &sn)] {
        dump(out, cfg, name, g)?;
    }
    let report = attack_pair(cfg, "member_vs_nonmember", 0, (&tm, &tn), (&sm, &sn), out)?;
    Ok(RunSummary {
        label: String::new(),
        observed_epochs: snaps.iter().map(|s| s.epoch).collect(),
        target,
        fed_rounds,
        attacks: vec![report],
        grad_norm_separation: norm_separation(cfg, &sm, &sn, out)?,
    })
}

fn run_finetune(ds: &Dataset, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    let plan = make_split(ds.len(), &cfg.split, cfg.seed).map_err(stage("split"))?;
    let (d, delta) = finetune_partition(&plan.target_train, cfg.finetune.base_fraction);
    let base_plan = SplitPlan {
        target_train: d.clone(),
        ..plan.clone()
    };
    let trained = train_target(ds, &base_plan, &cfg.target, cfg.seed).map_err(stage("target"))?;
    let base = match cfg.attacked_model {
        AttackedModel::Best => trained.best.clone(),
        AttackedModel::Last => trained.last.clone(),
    };
    let ft_cfg = TargetConfig {
        epochs: cfg.finetune.epochs,
        optimizer: cfg.finetune.optimizer.clone(),
        snapshot_epochs: Vec::new(),
        ..cfg.target.clone()
    };
    let loss_on_delta = |s: &ModelSnapshot| -> Result<f64> {
        Ok(crate::target::evaluate_target(&s.to_network()?, ds, &delta)?.1)
    };
    let tuned = finetune_target(&base, ds, &delta, &d, &ft_cfg, cfg.seed).map_err(stage("finetune"))?;
    let before = loss_on_delta(&base).map_err(stage("finetune"))?;
    let after = loss_on_delta(&tuned).map_err(stage("finetune"))?;
    let snaps = vec![base, tuned];
    if let Some(dir) = out {
        save_snapshots(&dir.join("snapshots"), "target", &snaps).map_err(stage("output"))?;
    }

    let (n_tr, n_te) = (cfg.split.attack_train_members, cfg.split.attack_test_members);
    let mut rng = rng_for(cfg.seed, &[stream::SPLIT, stream::FINETUNE]);
    let mut draw = |pool: &[usize]| {
        let mut p = pool.to_vec();
        p.shuffle(&mut rng);
        (p[..n_tr].to_vec(), p[n_tr..n_tr + n_te].to_vec())
    };
    let (d_tr, d_te) = draw(&d);
    let (x_tr, x_te) = draw(&delta);
    let ex = FeatureExtractor::new(&snaps, cfg.features.clone()).map_err(stage("features"))?;
    let groups = [
        ("base_train", &d_tr),
        ("base_test", &d_te),
        ("finetune_train", &x_tr),
        ("finetune_test", &x_te),
        ("outside_train", &plan.attack_train_nonmembers),
        ("outside_test", &plan.attack_test_nonmembers),
    ];
    let mut g = Vec::with_capacity(groups.len());
    for (name, ids) in groups {
        let group = extract(&ex, ds, ids)?;
        dump(out, cfg, name, &group)?;
        g.push(group);
    }
    let (dt, ds_, xt, xs, nt, ns) = (&g[0], &g[1], &g[2], &g[3], &g[4], &g[5]);
    let attacks = vec![
        attack_pair(cfg, "base_vs_outside", 0, (dt, nt), (ds_, ns), out)?,
        attack_pair(cfg, "finetune_vs_outside", 1, (xt, nt), (xs, ns), out)?,
        attack_pair(cfg, "base_vs_finetune", 2, (dt, xt), (ds_, xs), out)?,
    ];
    let mut target = target_report(&trained, snaps[0].epoch);
    target.finetune_loss = Some((before, after));
    Ok(RunSummary {
        label: String::new(),
        observed_epochs: snaps.iter().map(|s| s.epoch).collect(),
        target: Some(target),
        fed_rounds: None,
        attacks,
        grad_norm_separation: norm_separation(cfg, ds_, ns, out)?,
    })
}

/// Runs the federated simulation and draws the attack sets for the
/// configured attacker.
pub fn federate(ds: &Dataset, cfg: &ExperimentConfig) -> Result<(FedOutcome, SplitPlan)> {
    let f = cfg
        .fed
        .as_ref()
        .ok_or_else(|| invariant("federated requires fed settings", "`fed` is missing"))?;
    let sizes = cfg.fed_split_sizes(f);
    let fplan = make_fed_split(ds.len(), &sizes, cfg.seed).map_err(stage("split"))?;
    let members = cfg.member_pool(f, &fplan)?;
    let plan = draw_attack_sets(&members, &fplan.outside, &sizes, cfg.seed).map_err(stage("split"))?;
    let fcfg = cfg.fed_config(f, &fplan, cfg.ascent_batch(&plan))?;
    let outcome = run_federated(ds, &fcfg, &cfg.target, cfg.seed).map_err(stage("federated"))?;
    Ok((outcome, plan))
}

fn run_fed(ds: &Dataset, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    let (outcome, plan) = federate(ds, cfg)?;
    let snaps = outcome.log.target_snapshots().map_err(stage("federated"))?;
    if let Some(dir) = out {
        outcome.log.save(dir.join("observations")).map_err(stage("output"))?;
        outcome
            .final_aggregate
            .save(dir.join("final_aggregate.snap"))
            .map_err(stage("output"))?;
    }
    observe_and_attack(ds, cfg, &snaps, &plan, out, None, Some(outcome.rounds))
}
