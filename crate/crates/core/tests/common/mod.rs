//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use mialab::nn::{LayerSpec, Network};
use mialab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random net of 1 to 3 dense layers (ReLU between), sometimes behind a
/// row convolution, with non-zero biases.
pub fn random_net(seed: u64) -> (Network, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut width;
    if rng.gen_bool(0.3) {
        let (rows, cols, kw) = (rng.gen_range(1..4), rng.gen_range(3..7), rng.gen_range(1..3));
        let kernels = rng.gen_range(1..4);
        layers.push(LayerSpec::Conv1dRows {
            rows,
            width: cols,
            kernels,
            kernel_width: kw,
            stride: 1,
        });
        layers.push(LayerSpec::Relu);
        width = rows * (cols - kw + 1) * kernels;
    } else {
        width = rng.gen_range(2..9);
    }
    let input = match layers.first() {
        Some(LayerSpec::Conv1dRows { rows, width, .. }) => rows * width,
        _ => width,
    };
    let depth = rng.gen_range(1..4);
    for d in 0..depth {
        let out = if d + 1 == depth { rng.gen_range(2..6) } else { rng.gen_range(2..9) };
        layers.push(LayerSpec::dense(width, out));
        if d + 1 < depth {
            layers.push(LayerSpec::Relu);
        }
        width = out;
    }
    let mut net = Network::with_init(layers, seed, 0.5).unwrap();
    for p in net.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    (net, input)
}

/// Largest error between the analytic loss gradient and central
/// differences with step `h`: relative where |analytic| >= 1e-8, absolute
/// elsewhere.
pub fn max_gradient_error(net: &Network, x: &Tensor, y: usize, h: f64) -> f64 {
    let (_, grads) = net.loss_and_backward(x, y).unwrap();
    let loss = |n: &Network| n.loss_and_backward(x, y).unwrap().0.loss.unwrap();
    let mut worst: f64 = 0.0;
    for (t, g) in grads.param_grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus = net.clone();
            plus.params_mut()[t].data_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[t].data_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = g.data()[i];
            let err = if analytic.abs() < 1e-8 {
                (analytic - numeric).abs()
            } else {
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
            };
            worst = worst.max(err);
        }
    }
    worst
}

pub fn random_input(len: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::vector((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// `(tp, fp, tn, fn)` counted one score at a time.
pub fn brute_confusion(scores: &[f64], truth: &[bool], threshold: f64) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for i in 0..scores.len() {
        let predicted = scores[i] >= threshold;
        match (predicted, truth[i]) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

fn sse(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// Upper-side flags of the two-way split of `scores` with the smallest
/// within-cluster squared deviation, found by trying every threshold.
pub fn brute_best_partition(scores: &[f64]) -> Vec<bool> {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut best: Option<(f64, f64)> = None;
    for &c in &cuts[1..] {
        let lo: Vec<f64> = scores.iter().copied().filter(|&s| s < c).collect();
        let hi: Vec<f64> = scores.iter().copied().filter(|&s| s >= c).collect();
        let total = sse(&lo) + sse(&hi);
        if best.is_none_or(|(b, _)| total < b) {
            best = Some((total, c));
        }
    }
    let (_, c) = best.expect("two distinct scores");
    scores.iter().map(|&s| s >= c).collect()
}
