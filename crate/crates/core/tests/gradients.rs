mod common;

use common::{max_gradient_error, random_input, random_net};
use mialab::nn::{gradient_norm, LayerSelector};
use proptest::prelude::*;

#[test]
fn twenty_random_nets_match_central_differences() {
    for seed in 0..20 {
        let (net, input) = random_net(seed);
        let x = random_input(input, seed);
        let y = seed as usize % net.output_dim();
        let err = max_gradient_error(&net, &x, y, 1e-5);
        assert!(err <= 1e-4, "net {seed}: max error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_small_net_matches_central_differences(seed in 100u64..10_000) {
        let (net, input) = random_net(seed);
        let x = random_input(input, seed);
        let err = max_gradient_error(&net, &x, 0, 1e-5);
        prop_assert!(err <= 1e-4, "max error {:e}", err);
    }

    #[test]
    fn probabilities_normalize_and_loss_is_non_negative(seed in 0u64..10_000) {
        let (net, input) = random_net(seed);
        let (trace, grads) = net.loss_and_backward(&random_input(input, seed), 1 % net.output_dim()).unwrap();
        let sum: f64 = trace.probs.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(trace.loss.unwrap() >= 0.0);
        let all = gradient_norm(&grads, LayerSelector::All).unwrap();
        let layers = grads.param_layer.iter().max().map_or(0, |m| m + 1);
        let parts: f64 = (0..layers)
            .filter_map(|l| gradient_norm(&grads, LayerSelector::Index(l)).ok())
            .map(|n| n * n)
            .sum();
        prop_assert!((all * all - parts).abs() <= 1e-9 * (1.0 + all * all));
    }
}
