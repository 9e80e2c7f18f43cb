//! Supervised and label-free training of [`AttackNet`].

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{logistic, AttackArch, AttackNet, EncodedFeatures, FeatureLayout, Knowledge, RECON_TARGETS};
use crate::error::{MiaError, Result};
use crate::features::AttackFeatures;
use crate::nn::{OptimizerConfig, OptimizerState};
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Every batch holds `batch_size / 2` members and as many non-members.
    pub balanced_batches: bool,
    /// Standardize every component input with statistics of the training
    /// features.
    pub standardize_inputs: bool,
    /// Reconstruct `ln(1 + x)` of the loss and gradient norm instead of the
    /// raw values, whose non-member tail otherwise dominates the embedding.
    pub compress_targets: bool,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        AttackTrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 100,
            balanced_batches: true,
            standardize_inputs: true,
            compress_targets: true,
        }
    }
}

impl AttackTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.balanced_batches && !self.batch_size.is_multiple_of(2)) {
            return Err(MiaError::arg(format!(
                "batch_size {} must be positive and even when batches are balanced",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MiaError::arg("attack learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(MiaError::arg("attack epochs must be positive"));
        }
        Ok(())
    }

    fn optimizers(&self, net: &AttackNet) -> Vec<OptimizerState> {
        let cfg = OptimizerConfig::adam(self.learning_rate);
        net.networks().iter().map(|_| cfg.state()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy on the training batches as seen during the epoch.
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    /// Parameters from the epoch with the best test accuracy.
    pub net: AttackNet,
    pub curve: Vec<AttackEpoch>,
    pub best_epoch: usize,
    /// Members in every training batch, in order.
    pub batch_member_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct UnsupervisedOutcome {
    /// Encoder and components only; the decoder is dropped.
    pub net: AttackNet,
    /// Mean squared reconstruction error per epoch.
    pub curve: Vec<f64>,
    pub target_mean: [f64; RECON_TARGETS],
    pub target_std: [f64; RECON_TARGETS],
}

fn accuracy(scores: &[f64], members: usize) -> f64 {
    let correct = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| (s >= 0.5) == (i < members))
        .count();
    correct as f64 / scores.len().max(1) as f64
}

fn batches(cfg: &AttackTrainConfig, members: usize, nonmembers: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = rng_for(seed, &[stream::SHUFFLE, epoch as u64]);
    if !cfg.balanced_batches {
        let mut all: Vec<usize> = (0..members + nonmembers).collect();
        all.shuffle(&mut rng);
        return all.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    }
    let half = cfg.batch_size / 2;
    let mut m: Vec<usize> = (0..members).collect();
    let mut n: Vec<usize> = (members..members + nonmembers).collect();
    m.shuffle(&mut rng);
    n.shuffle(&mut rng);
    let count = members.max(nonmembers).div_ceil(half);
    (0..count)
        .map(|b| {
            (0..half)
                .map(|i| m[(b * half + i) % members])
                .chain((0..half).map(|i| n[(b * half + i) % nonmembers]))
                .collect()
        })
        .collect()
}

/// Minimizes the mean of `(h(d) - 1)^2` over members and `h(d)^2` over
/// non-members, where `h` is the logistic of the encoder output, and keeps
/// the parameters with the best test accuracy (earliest on ties).
pub fn train_supervised(
    arch: &AttackArch,
    train_members: &[AttackFeatures],
    train_nonmembers: &[AttackFeatures],
    test_members: &[AttackFeatures],
    test_nonmembers: &[AttackFeatures],
    cfg: &AttackTrainConfig,
    seed: u64,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    if train_members.is_empty() || train_nonmembers.is_empty() {
        return Err(MiaError::arg("supervised training needs members and non-members"));
    }
    let layout = FeatureLayout::of(&train_members[0])?;
    let mut net = AttackNet::new(
        arch.clone(),
        layout,
        Knowledge::Supervised,
        derive_seed(seed, &[stream::ATTACK, 0]),
    )?;
    let train: Vec<AttackFeatures> = train_members.iter().chain(train_nonmembers).cloned().collect();
    if cfg.standardize_inputs {
        net.fit_scalers(&train)?;
    }
    let enc = net.encode(&train)?;
    drop(train);
    let test: Vec<AttackFeatures> = test_members.iter().chain(test_nonmembers).cloned().collect();
    let test_enc = net.encode(&test)?;
    drop(test);
    let n_members = train_members.len();
    let mut opts = cfg.optimizers(&net);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut counts = Vec::new();
    let mut best: Option<(f64, usize, AttackNet)> = None;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (b, rows) in batches(cfg, n_members, train_nonmembers.len(), seed, epoch).iter().enumerate() {
            counts.push(rows.iter().filter(|&&r| r < n_members).count());
            let dropout = derive_seed(seed, &[stream::ATTACK, stream::DROPOUT, epoch as u64, b as u64]);
            let cache = net.forward_rows(&enc, rows, Some(dropout))?;
            let bsz = rows.len() as f64;
            let mut d_embed = Vec::with_capacity(rows.len());
            for (&z, &r) in cache.embedding().iter().zip(rows) {
                let target = if r < n_members { 1.0 } else { 0.0 };
                let h = logistic(z);
                loss_sum += (h - target) * (h - target);
                if (h >= 0.5) == (target == 1.0) {
                    correct += 1;
                }
                d_embed.push(2.0 * (h - target) * h * (1.0 - h) / bsz);
            }
            seen += rows.len();
            let traces = net.backward(&cache, d_embed, None)?;
            for ((opt, sub), g) in opts.iter_mut().zip(net.networks_mut()).zip(&traces) {
                opt.step(sub, g)?;
            }
        }
        let test_acc = if test_enc.len > 0 {
            accuracy(&net.scores_encoded(&test_enc)?, test_members.len())
        } else {
            0.0
        };
        curve.push(AttackEpoch {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| test_acc > *acc) {
            best = Some((test_acc, epoch, net.clone()));
        }
    }
    let (_, best_epoch, net) = best.expect("at least one epoch");
    Ok(SupervisedOutcome {
        net,
        curve,
        best_epoch,
        batch_member_counts: counts,
    })
}

/// Standardized reconstruction targets of every example in `pool`.
fn recon_targets(
    pool: &[AttackFeatures],
    compress: bool,
) -> (Vec<f64>, [f64; RECON_TARGETS], [f64; RECON_TARGETS]) {
    let raw: Vec<[f64; RECON_TARGETS]> = pool
        .iter()
        .map(|f| {
            let mut t = f.derived_targets();
            if compress {
                t[0] = t[0].ln_1p();
                t[4] = t[4].ln_1p();
            }
            t
        })
        .collect();
    let n = raw.len() as f64;
    let mut mean = [0.0; RECON_TARGETS];
    let mut std = [0.0; RECON_TARGETS];
    for r in &raw {
        (0..RECON_TARGETS).for_each(|k| mean[k] += r[k] / n);
    }
    for r in &raw {
        (0..RECON_TARGETS).for_each(|k| std[k] += (r[k] - mean[k]).powi(2) / n);
    }
    for s in std.iter_mut() {
        *s = if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let flat = raw
        .iter()
        .flat_map(|r| (0..RECON_TARGETS).map(move |k| (r[k] - mean[k]) / std[k]))
        .collect();
    (flat, mean, std)
}

/// Trains encoder and decoder to reconstruct the derived targets from
/// the scalar embedding, then drops the decoder.
pub fn train_unsupervised(
    arch: &AttackArch,
    pool: &[AttackFeatures],
    cfg: &AttackTrainConfig,
    seed: u64,
) -> Result<UnsupervisedOutcome> {
    let cfg = AttackTrainConfig {
        balanced_batches: false,
        ..cfg.clone()
    };
    cfg.validate()?;
    let first = pool.first().ok_or_else(|| MiaError::arg("unsupervised pool is empty"))?;
    let mut net = AttackNet::new(
        arch.clone(),
        FeatureLayout::of(first)?,
        Knowledge::Unsupervised,
        derive_seed(seed, &[stream::ATTACK, 1]),
    )?;
    if cfg.standardize_inputs {
        net.fit_scalers(pool)?;
    }
    let enc: EncodedFeatures = net.encode(pool)?;
    let (targets, target_mean, target_std) = recon_targets(pool, cfg.compress_targets);
    let mut opts = cfg.optimizers(&net);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sse = 0.0;
        for (b, rows) in batches(&cfg, pool.len(), 0, seed, epoch).iter().enumerate() {
            let dropout = derive_seed(seed, &[stream::ATTACK, stream::DROPOUT, epoch as u64, b as u64]);
            let cache = net.forward_rows(&enc, rows, Some(dropout))?;
            let recon = cache.recon().expect("decoder attached");
            let scale = 2.0 / (rows.len() * RECON_TARGETS) as f64;
            let mut d_rec = Vec::with_capacity(recon.len());
            for (i, &r) in rows.iter().enumerate() {
                for k in 0..RECON_TARGETS {
                    let diff = recon[i * RECON_TARGETS + k] - targets[r * RECON_TARGETS + k];
                    sse += diff * diff;
                    d_rec.push(scale * diff);
                }
            }
            let traces = net.backward(&cache, vec![0.0; rows.len()], Some(d_rec))?;
            for ((opt, sub), g) in opts.iter_mut().zip(net.networks_mut()).zip(&traces) {
                opt.step(sub, g)?;
            }
        }
        curve.push(sse / (pool.len() * RECON_TARGETS) as f64);
    }
    net.decoder = None;
    Ok(UnsupervisedOutcome {
        net,
        curve,
        target_mean,
        target_std,
    })
}

/// Columns: `example,score,member` (member is `1`, `0` or empty).
pub fn write_scores_csv(path: impl AsRef<Path>, rows: &[(usize, f64, Option<bool>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["example", "score", "member"])?;
    for &(id, score, member) in rows {
        let m = member.map_or(String::new(), |m| u8::from(m).to_string());
        w.write_record([id.to_string(), format!("{score:.17e}"), m])?;
    }
    w.flush()?;
    Ok(())
}
