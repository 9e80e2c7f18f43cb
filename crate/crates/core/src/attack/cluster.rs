//! Two-way clustering of scalar embeddings.
//!
//! Spectral clustering of points on a line into two groups reduces to
//! cutting the sorted values once, so the cut minimizing the summed
//! within-cluster squared deviation is found by scanning all cuts.

use crate::error::{MiaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Scores `>= threshold` form the upper cluster.
    pub threshold: f64,
    /// Whether the upper cluster is labelled member.
    pub upper_is_member: bool,
    /// Per input, `true` for member.
    pub members: Vec<bool>,
    /// Within-cluster sum of squared deviations of the chosen cut.
    pub within_sse: f64,
}

/// Splits `scores` into two clusters and labels as non-member the one
/// whose mean gradient norm is larger (ties: the lower-score cluster).
pub fn cluster_membership(scores: &[f64], grad_norms: &[f64]) -> Result<ClusterResult> {
    if scores.len() != grad_norms.len() {
        return Err(MiaError::arg(format!(
            "{} scores but {} gradient norms",
            scores.len(),
            grad_norms.len()
        )));
    }
    if scores.len() < 2 {
        return Err(MiaError::arg("clustering needs at least two scores"));
    }
    if scores.iter().chain(grad_norms).any(|v| !v.is_finite()) {
        return Err(MiaError::Numeric("clustering input is not finite".into()));
    }
    let (cut, within_sse) = best_cut(scores)?;
    let threshold = cut;
    let upper: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let mean_norm = |want: bool| {
        let (sum, n) = upper
            .iter()
            .zip(grad_norms)
            .filter(|(&u, _)| u == want)
            .fold((0.0, 0usize), |(s, n), (_, &g)| (s + g, n + 1));
        sum / n as f64
    };
    let upper_is_member = mean_norm(true) <= mean_norm(false);
    Ok(ClusterResult {
        threshold,
        upper_is_member,
        members: upper.iter().map(|&u| u == upper_is_member).collect(),
        within_sse,
    })
}

/// Threshold (midpoint between neighbouring distinct values) of the cut
/// with the smallest within-cluster SSE; the lowest such cut on ties.
fn best_cut(scores: &[f64]) -> Result<(f64, f64)> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // centring keeps the prefix-sum formula accurate
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = sorted.iter().map(|v| v - mean).collect();
    let total: f64 = c.iter().sum();
    let total_sq: f64 = c.iter().map(|v| v * v).sum();
    let (mut s, mut sq) = (0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for i in 1..n {
        s += c[i - 1];
        sq += c[i - 1] * c[i - 1];
        if sorted[i] == sorted[i - 1] {
            continue;
        }
        let (nl, nr) = (i as f64, (n - i) as f64);
        let left = sq - s * s / nl;
        let right = (total_sq - sq) - (total - s) * (total - s) / nr;
        let sse = left.max(0.0) + right.max(0.0);
        if best.is_none_or(|(b, _)| sse < b) {
            best = Some((sse, sorted[i - 1] + (sorted[i] - sorted[i - 1]) / 2.0));
        }
    }
    best.map(|(sse, t)| (t, sse))
        .ok_or_else(|| MiaError::Degenerate("all scores are identical, only one cluster".into()))
}
