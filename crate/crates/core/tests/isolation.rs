use mialab::data::synth_purchase_like;
use mialab::fed::{run_federated, train_local, AscentPlacement, AttackMode, AttackerRole, FedConfig, Observation};
use mialab::nn::{Network, OptimizerConfig};
use mialab::rng::{derive_seed, stream};
use mialab::target::TargetConfig;

fn setup(mode: AttackMode, include_victim: bool) -> (mialab::data::Dataset, FedConfig, TargetConfig) {
    let ds = synth_purchase_like(300, 12, 3, 0.3, 9).unwrap();
    let cfg = FedConfig {
        num_participants: 4,
        rounds: 5,
        local_epochs_per_round: 2,
        observed_rounds: vec![2, 5],
        attacker_role: AttackerRole::Global { victim: 2 },
        attack_mode: mode,
        gamma: 0.0,
        isolation_includes_victim: include_victim,
        ascent_placement: AscentPlacement::Download,
        participant_splits: (0..4).map(|p| (p * 40..p * 40 + 40).collect()).collect(),
        target_batch: vec![],
        test_split: (200..300).collect(),
    };
    let tcfg = TargetConfig {
        layer_sizes: vec![12, 10, 3],
        optimizer: OptimizerConfig::adam(0.01),
        epochs: 0,
        batch_size: 8,
        snapshot_epochs: vec![],
    };
    (ds, cfg, tcfg)
}

#[test]
fn isolated_victim_trains_as_if_alone() {
    let seed = 21;
    let (ds, cfg, tcfg) = setup(AttackMode::Isolate, false);
    let out = run_federated(&ds, &cfg, &tcfg, seed).unwrap();

    let victim = 2;
    let mut net = Network::new(tcfg.arch(), derive_seed(seed, &[stream::INIT])).unwrap();
    let mut opt = tcfg.optimizer.state();
    let mut alone = Vec::new();
    for round in 1..=cfg.rounds {
        train_local(
            &mut net,
            &mut opt,
            &ds,
            &cfg.participant_splits[victim],
            cfg.local_epochs_per_round,
            tcfg.batch_size,
            seed,
            victim,
            round,
        )
        .unwrap();
        alone.push(net.params().to_vec());
    }
    assert_eq!(out.final_uploads[victim], alone[cfg.rounds - 1]);
    for entry in &out.log.entries {
        let Observation::Uploads { round, params } = entry else {
            panic!("global attacker should record uploads");
        };
        assert_eq!(params[victim], alone[round - 1], "round {round}");
    }
}

#[test]
fn victim_in_the_others_aggregate_changes_their_training() {
    let (ds, cfg_a, tcfg) = setup(AttackMode::Isolate, false);
    let (_, cfg_b, _) = setup(AttackMode::Isolate, true);
    let a = run_federated(&ds, &cfg_a, &tcfg, 4).unwrap();
    let b = run_federated(&ds, &cfg_b, &tcfg, 4).unwrap();
    assert_eq!(a.final_uploads[2], b.final_uploads[2]);
    assert_ne!(a.final_uploads[0], b.final_uploads[0]);
}

#[test]
fn passive_victim_does_not_train_alone() {
    let (ds, cfg, tcfg) = setup(AttackMode::Passive, false);
    let (_, iso, _) = setup(AttackMode::Isolate, false);
    let a = run_federated(&ds, &cfg, &tcfg, 4).unwrap();
    let b = run_federated(&ds, &iso, &tcfg, 4).unwrap();
    assert_ne!(a.final_uploads[2], b.final_uploads[2]);
}
