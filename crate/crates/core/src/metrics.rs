//! Attack metrics, ROC curves and gradient-norm summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MiaError, Result};
use crate::features::AttackFeatures;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub attack_accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub threshold: f64,
    /// `(fpr, tpr)` from the strictest threshold to the loosest.
    pub roc_points: Vec<(f64, f64)>,
    pub auc: f64,
    pub members: usize,
    pub nonmembers: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_accuracy: Option<BTreeMap<usize, f64>>,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Member is predicted iff `score >= threshold`.
pub fn evaluate(scores: &[f64], truth: &[bool], threshold: f64) -> Result<EvalResult> {
    if scores.len() != truth.len() {
        return Err(MiaError::arg(format!(
            "{} scores but {} membership labels",
            scores.len(),
            truth.len()
        )));
    }
    if scores.is_empty() {
        return Err(MiaError::arg("nothing to evaluate"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MiaError::Numeric("NaN score".into()));
    }
    let p = truth.iter().filter(|&&t| t).count();
    let n = truth.len() - p;
    let (mut tp, mut tn) = (0, 0);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s >= threshold, t) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    let roc_points = roc(scores, truth, p, n);
    let auc = roc_points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(EvalResult {
        attack_accuracy: (tp + tn) as f64 / truth.len() as f64,
        tpr: rate(tp, p),
        fpr: rate(n - tn, n),
        threshold,
        roc_points,
        auc,
        members: p,
        nonmembers: n,
        per_class_accuracy: None,
    })
}

/// [`evaluate`] plus accuracy restricted to each class label.
pub fn evaluate_by_class(scores: &[f64], truth: &[bool], labels: &[usize], threshold: f64) -> Result<EvalResult> {
    if labels.len() != scores.len() {
        return Err(MiaError::arg("one class label per score required"));
    }
    let mut r = evaluate(scores, truth, threshold)?;
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((&s, &t), &y) in scores.iter().zip(truth).zip(labels) {
        let e = tally.entry(y).or_default();
        e.0 += usize::from((s >= threshold) == t);
        e.1 += 1;
    }
    r.per_class_accuracy = Some(tally.into_iter().map(|(y, (c, n))| (y, rate(c, n))).collect());
    Ok(r)
}

/// Thresholds `+inf`, midpoints between consecutive distinct scores, and
/// `-inf`.
fn roc(scores: &[f64], truth: &[bool], p: usize, n: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((rate(fp, n), rate(tp, p)));
    }
    // the loop's last point is the -inf threshold; with no negatives or
    // positives the corresponding axis stays at 0
    points
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSample {
    pub epoch: u64,
    pub member: bool,
    pub value: f64,
}

/// Last-layer gradient norms at every observation of every example.
pub fn norm_samples(feats: &[AttackFeatures], member: bool) -> Vec<NormSample> {
    feats
        .iter()
        .flat_map(|f| {
            f.diagnostics.iter().map(move |d| NormSample {
                epoch: d.epoch,
                member,
                value: d.grad_norm,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub epoch: u64,
    pub member: bool,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub epoch: u64,
    pub member_mean: f64,
    pub nonmember_mean: f64,
    pub pooled_std: f64,
    /// `|member_mean - nonmember_mean| > pooled_std / 2`.
    pub separated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormReport {
    /// Histogram bins are `[k * bin_width, (k + 1) * bin_width)`, the last
    /// one closed.
    pub bin_width: f64,
    pub groups: Vec<GroupStats>,
    pub separation: Vec<Separation>,
}

/// Per epoch and group: mean, population std and a fixed-bin histogram
/// over `[0, max]`.
pub fn grad_norm_report(samples: &[NormSample], bins: usize) -> Result<GradNormReport> {
    if samples.is_empty() || bins == 0 {
        return Err(MiaError::arg("gradient-norm report needs samples and at least one bin"));
    }
    if samples.iter().any(|s| !s.value.is_finite() || s.value < 0.0) {
        return Err(MiaError::Numeric("gradient norms must be finite and non-negative".into()));
    }
    let max = samples.iter().map(|s| s.value).fold(0.0, f64::max);
    let bin_width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut grouped: BTreeMap<(u64, bool), Vec<f64>> = BTreeMap::new();
    for s in samples {
        grouped.entry((s.epoch, s.member)).or_default().push(s.value);
    }
    let mut groups = Vec::new();
    for (&(epoch, member), v) in &grouped {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut histogram = vec![0; bins];
        for x in v {
            histogram[((x / bin_width) as usize).min(bins - 1)] += 1;
        }
        groups.push(GroupStats {
            epoch,
            member,
            count: v.len(),
            mean,
            std,
            histogram,
        });
    }
    let mut separation = Vec::new();
    for m in groups.iter().filter(|g| g.member) {
        if let Some(o) = groups.iter().find(|g| !g.member && g.epoch == m.epoch) {
            let (nm, no) = (m.count as f64, o.count as f64);
            let pooled_std = ((nm * m.std * m.std + no * o.std * o.std) / (nm + no)).sqrt();
            separation.push(Separation {
                epoch: m.epoch,
                member_mean: m.mean,
                nonmember_mean: o.mean,
                pooled_std,
                separated: (m.mean - o.mean).abs() > pooled_std / 2.0,
            });
        }
    }
    Ok(GradNormReport {
        bin_width,
        groups,
        separation,
    })
}

impl GradNormReport {
    /// Columns: `epoch,group,count,mean,std,bin_width,h0..h{bins-1}`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let bins = self.groups.first().map_or(0, |g| g.histogram.len());
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = ["epoch", "group", "count", "mean", "std", "bin_width"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..bins).map(|k| format!("h{k}")));
        w.write_record(&header)?;
        for g in &self.groups {
            let mut row = vec![
                g.epoch.to_string(),
                if g.member { "member" } else { "nonmember" }.to_string(),
                g.count.to_string(),
                g.mean.to_string(),
                g.std.to_string(),
                self.bin_width.to_string(),
            ];
            row.extend(g.histogram.iter().map(usize::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scores() {
        let r = evaluate(&[1.0, 1.0, 0.0, 0.0], &[true, true, false, false], 0.5).unwrap();
        assert_eq!(r.attack_accuracy, 1.0);
        assert!(r.roc_points.contains(&(0.0, 1.0)));
        assert_eq!(r.auc, 1.0);
        assert_eq!((r.tpr, r.fpr), (1.0, 0.0));
    }

    #[test]
    fn constant_scores_are_chance() {
        let r = evaluate(&[0.3; 6], &[true, false, true, false, true, false], 0.3).unwrap();
        assert_eq!(r.attack_accuracy, 0.5);
        assert_eq!(r.roc_points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!((r.auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone_and_bounded() {
        let s = [0.9, 0.1, 0.4, 0.4, 0.7, 0.2, 0.8];
        let t = [true, false, true, false, false, true, true];
        let r = evaluate(&s, &t, 0.5).unwrap();
        assert_eq!(r.roc_points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.roc_points.last(), Some(&(1.0, 1.0)));
        assert!(r.roc_points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        assert!(r.auc > 0.5 && r.auc <= 1.0);
    }

    #[test]
    fn per_class_and_errors() {
        let r = evaluate_by_class(&[0.9, 0.1, 0.9], &[true, true, false], &[0, 0, 1], 0.5).unwrap();
        let pc = r.per_class_accuracy.unwrap();
        assert_eq!(pc[&0], 0.5);
        assert_eq!(pc[&1], 0.0);
        assert!(evaluate(&[0.1], &[true, false], 0.5).is_err());
    }

    #[test]
    fn norm_report_examples() {
        let one = grad_norm_report(
            &[3.0, 4.0].map(|value| NormSample { epoch: 1, member: true, value }),
            4,
        )
        .unwrap();
        assert_eq!(one.groups[0].mean, 3.5);
        assert!(one.separation.is_empty());

        let mut s: Vec<NormSample> = (0..5).map(|_| NormSample { epoch: 2, member: true, value: 0.0 }).collect();
        s.extend((0..7).map(|_| NormSample { epoch: 2, member: false, value: 1.0 }));
        let r = grad_norm_report(&s, 10).unwrap();
        assert_eq!(r.separation[0].member_mean, 0.0);
        assert_eq!(r.separation[0].nonmember_mean, 1.0);
        assert!(r.separation[0].separated);
        for g in &r.groups {
            assert_eq!(g.histogram.iter().sum::<usize>(), g.count);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norms.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("epoch,group,count,mean,std,bin_width,h0,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"a": 1})).unwrap());
        assert_eq!(a.len(), 64);
    }
}
