mod common;

use common::{brute_best_partition, brute_confusion};
use mialab::attack::cluster_membership;
use mialab::data::{make_split, SplitSizes};
use mialab::features::normalized_entropy;
use mialab::fed::{exchange, fedavg, isolate_participant, Params};
use mialab::metrics::evaluate;
use mialab::nn::softmax;
use mialab::snapshot::{decode_records, encode_records, SnapshotRecord};
use mialab::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;

fn params(values: &[f64]) -> Params {
    let half = values.len() / 2;
    vec![
        Tensor::vector(values[..half].to_vec()),
        Tensor::vector(values[half..].to_vec()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fedavg_of_integers_is_the_exact_mean(
        log_n in 1u32..4,
        raw in vec(vec(-1000i32..1000, 6), 8),
    ) {
        let n = 1usize << log_n;
        let uploads: Vec<Params> = raw[..n]
            .iter()
            .map(|u| params(&u.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
            .collect();
        let refs: Vec<&Params> = uploads.iter().collect();
        let avg = fedavg(&refs).unwrap();
        for (j, t) in avg.iter().enumerate() {
            for (i, &v) in t.data().iter().enumerate() {
                let exact: f64 = uploads.iter().map(|u| u[j].data()[i]).sum::<f64>() / n as f64;
                prop_assert_eq!(v.to_bits(), exact.to_bits());
            }
        }
    }

    #[test]
    fn fedavg_tracks_the_naive_mean(raw in vec(vec(-1e3f64..1e3, 6), 2..7)) {
        let uploads: Vec<Params> = raw.iter().map(|u| params(u)).collect();
        let refs: Vec<&Params> = uploads.iter().collect();
        let avg = fedavg(&refs).unwrap();
        let n = uploads.len() as f64;
        for (j, t) in avg.iter().enumerate() {
            for (i, &v) in t.data().iter().enumerate() {
                let naive: f64 = uploads.iter().map(|u| u[j].data()[i]).sum::<f64>() / n;
                prop_assert!((v - naive).abs() <= 1e-12 * (1.0 + naive.abs()));
            }
        }
    }

    #[test]
    fn identical_uploads_are_a_bit_exact_fixed_point(u in vec(-1e6f64..1e6, 6), n in 2usize..9) {
        let uploads = vec![params(&u); n];
        let ex = exchange(&uploads).unwrap();
        prop_assert_eq!(&ex.aggregate, &uploads[0]);
        prop_assert!(ex.downloads.iter().all(|d| d == &uploads[0]));
    }

    #[test]
    fn isolated_victim_gets_its_own_upload(raw in vec(vec(-5.0f64..5.0, 4), 3..6), victim in 0usize..3) {
        let uploads: Vec<Params> = raw.iter().map(|u| params(u)).collect();
        let ex = isolate_participant(&uploads, victim, false).unwrap();
        prop_assert_eq!(&ex.downloads[victim], &uploads[victim]);
        let others: Vec<&Params> = uploads.iter().enumerate().filter(|&(p, _)| p != victim).map(|(_, u)| u).collect();
        let expected = fedavg(&others).unwrap();
        for (p, d) in ex.downloads.iter().enumerate() {
            if p != victim {
                prop_assert_eq!(d, &expected);
            }
        }
    }

    #[test]
    fn evaluate_matches_the_confusion_matrix(
        raw in vec((0u8..20, any::<bool>()), 1..60),
        threshold in 0u8..21,
    ) {
        // coarse scores force ties at the threshold
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| f64::from(s) / 20.0).collect();
        let truth: Vec<bool> = raw.iter().map(|&(_, t)| t).collect();
        let t = f64::from(threshold) / 20.0;
        let r = evaluate(&scores, &truth, t).unwrap();
        let (tp, fp, tn, fn_) = brute_confusion(&scores, &truth, t);
        prop_assert_eq!(r.attack_accuracy, (tp + tn) as f64 / scores.len() as f64);
        let rate = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        prop_assert_eq!(r.tpr, rate(tp, fn_));
        prop_assert_eq!(r.fpr, rate(fp, tn));
        prop_assert_eq!((r.members, r.nonmembers), (tp + fn_, fp + tn));
        let pts = &r.roc_points;
        prop_assert_eq!(pts[0], (0.0, 0.0));
        prop_assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        prop_assert!((0.0..=1.0).contains(&r.auc));
    }

    #[test]
    fn clustering_is_the_optimal_cut(scores in vec(-100.0f64..100.0, 2..80)) {
        prop_assume!(scores.iter().any(|&s| s != scores[0]));
        let norms = vec![1.0; scores.len()];
        let r = cluster_membership(&scores, &norms).unwrap();
        let upper: Vec<bool> = scores.iter().map(|&s| s >= r.threshold).collect();
        prop_assert_eq!(upper, brute_best_partition(&scores));
    }

    #[test]
    fn entropy_is_normalized(logits in vec(-30.0f64..30.0, 2..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let h = normalized_entropy(&p);
        prop_assert!((0.0..=1.0).contains(&h));
    }

    #[test]
    fn snapshot_records_round_trip(
        values in vec(-1e300f64..1e300, 1..40),
        epoch in any::<u64>(),
        tag in "[a-z0-9_]{0,12}",
    ) {
        let rec = SnapshotRecord {
            tag,
            epoch,
            meta: "{}".into(),
            arch: vec![mialab::nn::LayerSpec::dense(values.len(), 1)],
            params: vec![Tensor::matrix(values.len(), 1, values.clone()).unwrap(), Tensor::vector(vec![values[0]])],
        };
        let back = decode_records(&encode_records(std::slice::from_ref(&rec))).unwrap();
        prop_assert_eq!(back, vec![rec]);
    }

    #[test]
    fn splits_are_disjoint(seed in any::<u64>(), train in 20usize..200, test in 1usize..100, a in 1usize..10) {
        let sizes = SplitSizes {
            target_train: train,
            target_test: test,
            attack_train_members: a,
            attack_train_nonmembers: a,
            attack_test_members: a,
            attack_test_nonmembers: a,
            finetune: 0,
        };
        let plan = make_split(400, &sizes, seed).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in plan.attack_train_members.iter().chain(&plan.attack_test_members)
            .chain(&plan.attack_train_nonmembers).chain(&plan.attack_test_nonmembers)
        {
            prop_assert!(seen.insert(*i));
        }
        prop_assert!(plan.attack_test_members.iter().all(|i| plan.target_train.contains(i)));
        prop_assert!(plan.attack_test_nonmembers.iter().all(|i| !plan.target_train.contains(i)));
    }
}
