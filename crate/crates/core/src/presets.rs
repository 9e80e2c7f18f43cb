//! Named experiment configs sized to run on one core in minutes.

use crate::attack::{AttackArch, AttackTrainConfig, Knowledge};
use crate::data::SplitSizes;
use crate::experiment::{
    ActiveKind, AttackedModel, Attacker, DatasetSpec, ExperimentConfig, FedSettings, FinetuneSettings, Placement,
    Scenario, Sweep,
};
use crate::features::FeatureSelection;
use crate::fed::AscentPlacement;
use crate::nn::OptimizerConfig;
use crate::target::TargetConfig;

pub const DEFAULT_SEED: u64 = 1;

/// 4,000 clustered binary records, 200 features, 20 classes.
pub fn default_dataset() -> DatasetSpec {
    DatasetSpec::Synthetic {
        n: 4000,
        dim: 200,
        classes: 20,
        spread: 0.38,
    }
}

pub fn default_target() -> TargetConfig {
    TargetConfig {
        layer_sizes: vec![200, 256, 128, 20],
        optimizer: OptimizerConfig::adam(0.001),
        epochs: 40,
        batch_size: 64,
        snapshot_epochs: Vec::new(),
    }
}

/// The default architecture with 16 convolution kernels instead of 1000.
pub fn desk_attack_arch() -> AttackArch {
    AttackArch {
        conv_kernels: 16,
        ..AttackArch::default()
    }
}

pub fn desk_attack_train() -> AttackTrainConfig {
    AttackTrainConfig {
        epochs: 30,
        ..AttackTrainConfig::default()
    }
}

fn split(train: usize, test: usize, attack: usize) -> SplitSizes {
    SplitSizes {
        target_train: train,
        target_test: test,
        attack_train_members: attack,
        attack_train_nonmembers: attack,
        attack_test_members: attack,
        attack_test_nonmembers: attack,
        finetune: 0,
    }
}

/// Four parties with 500 records each, 30 rounds, the last five even
/// rounds observed.
pub fn desk_fed() -> FedSettings {
    FedSettings {
        num_participants: 4,
        per_participant: 500,
        rounds: 30,
        local_epochs_per_round: 1,
        observed_rounds: vec![22, 24, 26, 28, 30],
        victim: 0,
        gamma: 1e-5,
        isolation_includes_victim: false,
        ascent_placement: AscentPlacement::Download,
        overlap_pool: None,
    }
}

/// Stand-alone white-box attack on the best-test-accuracy snapshot.
pub fn standalone(knowledge: Knowledge, name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        scenario: Scenario::Standalone,
        attacker: Attacker::Passive,
        placement: None,
        knowledge,
        features: FeatureSelection::white_box(),
        dataset: default_dataset(),
        split: split(1000, 1000, 500),
        target: default_target(),
        attacked_model: AttackedModel::Best,
        finetune: FinetuneSettings::default(),
        fed: None,
        attack_arch: desk_attack_arch(),
        attack_train: desk_attack_train(),
        sweep: None,
        grad_norm_bins: 20,
        seed: DEFAULT_SEED,
        output_dir: None,
        dump_features: false,
    }
}

pub fn federated(name: &str, attacker: Attacker, placement: Placement) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        scenario: Scenario::Federated,
        attacker,
        placement: Some(placement),
        split: split(0, 500, 200),
        fed: Some(desk_fed()),
        ..standalone(Knowledge::Supervised, name)
    }
}

pub fn scenario_presets() -> Vec<ExperimentConfig> {
    let finetune = ExperimentConfig {
        scenario: Scenario::Finetune,
        split: split(1000, 1000, 200),
        ..standalone(Knowledge::Supervised, "finetune-three-way")
    };
    let epoch_sweep = ExperimentConfig {
        sweep: Some(Sweep::ObservedRounds(vec![
            vec![2, 4, 6, 8, 10],
            vec![12, 14, 16, 18, 20],
            vec![22, 24, 26, 28, 30],
        ])),
        ..federated("epoch-sweep", Attacker::Passive, Placement::Global)
    };
    let trainsize = ExperimentConfig {
        sweep: Some(Sweep::TrainSize(vec![500, 1000, 1500])),
        split: split(1000, 1000, 250),
        ..standalone(Knowledge::Supervised, "trainsize-sweep")
    };
    vec![
        standalone(Knowledge::Supervised, "standalone-supervised"),
        standalone(Knowledge::Unsupervised, "standalone-unsupervised"),
        finetune,
        federated("fed-passive-global", Attacker::Passive, Placement::Global),
        federated("fed-passive-local", Attacker::Passive, Placement::Local(1)),
        federated(
            "fed-active-ascent",
            Attacker::Active(ActiveKind::GradientAscent),
            Placement::Global,
        ),
        federated("fed-active-isolate", Attacker::Active(ActiveKind::Isolate), Placement::Global),
        federated("fed-active-both", Attacker::Active(ActiveKind::Both), Placement::Global),
        epoch_sweep,
        trainsize,
    ]
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    scenario_presets().into_iter().find(|c| c.name == name)
}
