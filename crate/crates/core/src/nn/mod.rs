//! Dense network engine with explicit forward and backward passes.

mod layer;
mod network;
mod optim;

pub use layer::LayerSpec;
pub use network::{gradient_norm, BackwardTrace, BatchCache, ForwardTrace, LayerSelector, Network};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[y]`, via log-sum-exp.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    (lse - logits[y]).max(0.0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over a batch of logits.
///
/// Returns the mean loss, the gradient w.r.t. the logits (already divided by
/// the batch size) and the number of correct argmax predictions.
pub fn softmax_xent_batch(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>, usize) {
    let batch = labels.len();
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        loss += cross_entropy(row, y);
        if argmax(row) == y {
            correct += 1;
        }
        let mut p = softmax(row);
        p[y] -= 1.0;
        grad.extend(p.into_iter().map(|v| v / batch as f64));
    }
    (loss / batch as f64, grad, correct)
}
