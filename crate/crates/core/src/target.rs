//! Stand-alone and fine-tuned target models.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitPlan};
use crate::error::{MiaError, Result};
use crate::nn::{softmax_xent_batch, LayerSpec, Network, OptimizerConfig, OptimizerState};
use crate::rng::{derive_seed, rng_for, stream};
use crate::snapshot::ModelSnapshot;

/// Architecture and training schedule of a dense target classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    /// Input width, hidden widths, number of classes.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs (1-based) whose parameters are kept as snapshots.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
}

fn default_batch() -> usize {
    64
}

impl TargetConfig {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(MiaError::arg("target needs at least input and output sizes"));
        }
        if self.layer_sizes[0] != ds.dim() {
            return Err(MiaError::arg(format!(
                "target input size {} != dataset dimension {}",
                self.layer_sizes[0],
                ds.dim()
            )));
        }
        if *self.layer_sizes.last().expect("len >= 2") != ds.num_classes {
            return Err(MiaError::arg(format!(
                "last layer size must equal the {} classes",
                ds.num_classes
            )));
        }
        if self.batch_size == 0 {
            return Err(MiaError::arg("batch size must be positive"));
        }
        if self.snapshot_epochs.windows(2).any(|w| w[0] >= w[1])
            || self.snapshot_epochs.iter().any(|&e| e == 0 || e > self.epochs)
        {
            return Err(MiaError::arg(format!(
                "snapshot epochs {:?} must be sorted, unique and within 1..={}",
                self.snapshot_epochs, self.epochs
            )));
        }
        self.optimizer.validate()
    }

    /// Dense layers with ReLU between them; raw logits at the end.
    pub fn arch(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let n = self.layer_sizes.len();
        for (i, w) in self.layer_sizes.windows(2).enumerate() {
            layers.push(LayerSpec::dense(w[0], w[1]));
            if i + 2 < n {
                layers.push(LayerSpec::Relu);
            }
        }
        layers
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Result of [`train_target`].
#[derive(Clone, Debug)]
pub struct TrainedTarget {
    /// Snapshots at the configured epochs, in order.
    pub snapshots: Vec<ModelSnapshot>,
    /// Epoch 0 (initialization) first.
    pub curve: Vec<EpochStats>,
    /// Snapshot with the best test accuracy (earliest on ties).
    pub best: ModelSnapshot,
    pub last: ModelSnapshot,
}

impl TrainedTarget {
    pub fn stats(&self, epoch: u64) -> &EpochStats {
        &self.curve[epoch as usize]
    }

    pub fn gap(&self) -> f64 {
        let s = self.stats(self.best.epoch);
        s.train_acc - s.test_acc
    }
}

/// One pass over `idx` in shuffled mini-batches. Returns the mean training
/// loss.
pub fn train_epoch(
    net: &mut Network,
    opt: &mut OptimizerState,
    ds: &Dataset,
    idx: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut order = idx.to_vec();
    order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE]));
    let mut total = 0.0;
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let (x, y) = ds.gather(chunk);
        let cache = net.forward_batch(&x, chunk.len(), Some(derive_seed(seed, &[stream::DROPOUT, b as u64])))?;
        let (loss, dlogits, _) = softmax_xent_batch(cache.output(), &y, ds.num_classes);
        total += loss * chunk.len() as f64;
        let (grads, _) = net.backward_batch(&cache, dlogits, false)?;
        opt.step(net, &grads)?;
    }
    Ok(total / idx.len() as f64)
}

/// Accuracy and mean cross-entropy over `idx` (dropout off).
pub fn evaluate_target(net: &Network, ds: &Dataset, idx: &[usize]) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for chunk in idx.chunks(256) {
        let (x, y) = ds.gather(chunk);
        let cache = net.forward_batch(&x, chunk.len(), None)?;
        let (l, _, c) = softmax_xent_batch(cache.output(), &y, ds.num_classes);
        correct += c;
        loss += l * chunk.len() as f64;
    }
    Ok((correct as f64 / idx.len() as f64, loss / idx.len() as f64))
}

/// Mini-batch training on `split.target_train`, evaluated on
/// `split.target_test` after every epoch.
pub fn train_target(ds: &Dataset, split: &SplitPlan, cfg: &TargetConfig, seed: u64) -> Result<TrainedTarget> {
    if split.target_train.is_empty() {
        return Err(MiaError::arg("target training set is empty"));
    }
    cfg.validate(ds)?;
    let mut net = Network::new(cfg.arch(), derive_seed(seed, &[stream::INIT]))?;
    let mut opt = cfg.optimizer.state();
    let (train_acc, train_loss) = evaluate_target(&net, ds, &split.target_train)?;
    let (test_acc, _) = evaluate_target(&net, ds, &split.target_test)?;
    let mut curve = vec![EpochStats {
        epoch: 0,
        train_loss,
        train_acc,
        test_acc,
    }];
    let mut best = ModelSnapshot::from_network(&net, 0);
    let mut best_acc = test_acc;
    let mut snapshots = Vec::new();
    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(seed, &[stream::SHUFFLE, epoch as u64]);
        let train_loss = train_epoch(&mut net, &mut opt, ds, &split.target_train, cfg.batch_size, epoch_seed)?;
        let (train_acc, _) = evaluate_target(&net, ds, &split.target_train)?;
        let (test_acc, _) = evaluate_target(&net, ds, &split.target_test)?;
        curve.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            test_acc,
        });
        if test_acc > best_acc || best.epoch == 0 {
            best_acc = test_acc;
            best = ModelSnapshot::from_network(&net, epoch as u64);
        }
        if cfg.snapshot_epochs.binary_search(&epoch).is_ok() {
            snapshots.push(ModelSnapshot::from_network(&net, epoch as u64));
        }
    }
    let last = ModelSnapshot::from_network(&net, cfg.epochs as u64);
    if cfg.epochs == 0 {
        snapshots.push(last.clone());
    }
    Ok(TrainedTarget {
        snapshots,
        curve,
        best,
        last,
    })
}

/// Continues training `base` on `d_delta` only, with fresh optimizer state.
pub fn finetune_target(
    base: &ModelSnapshot,
    ds: &Dataset,
    d_delta: &[usize],
    base_train: &[usize],
    cfg: &TargetConfig,
    seed: u64,
) -> Result<ModelSnapshot> {
    let base_set: HashSet<usize> = base_train.iter().copied().collect();
    if let Some(i) = d_delta.iter().find(|i| base_set.contains(i)) {
        return Err(MiaError::arg(format!(
            "fine-tune record {i} is also in the base training set"
        )));
    }
    if d_delta.is_empty() {
        return Err(MiaError::arg("fine-tune set is empty"));
    }
    cfg.optimizer.validate()?;
    let mut net = base.to_network()?;
    let mut opt = cfg.optimizer.state();
    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(seed, &[stream::FINETUNE, epoch as u64]);
        train_epoch(&mut net, &mut opt, ds, d_delta, cfg.batch_size, epoch_seed)?;
    }
    Ok(ModelSnapshot::from_network(&net, base.epoch + cfg.epochs as u64))
}

/// Splits `train` into the base set (first `fraction`) and the fine-tune
/// set (the rest).
pub fn finetune_partition(train: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let cut = (train.len() as f64 * fraction).round() as usize;
    (train[..cut].to_vec(), train[cut..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_purchase_like;
    use crate::tensor::Tensor;

    fn separable() -> (Dataset, SplitPlan) {
        // two classes split by the sign of the first coordinate
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..80 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.extend_from_slice(&[s * (1.0 + (i % 7) as f64 * 0.1), (i % 5) as f64 * 0.2 - 0.4]);
            y.push(usize::from(s > 0.0));
        }
        let ds = Dataset::new(Tensor::matrix(80, 2, x).unwrap(), y, 2, "sep").unwrap();
        let plan = SplitPlan {
            target_train: (0..60).collect(),
            target_test: (60..80).collect(),
            attack_train_members: vec![],
            attack_train_nonmembers: vec![],
            attack_test_members: vec![],
            attack_test_nonmembers: vec![],
            finetune: vec![],
        };
        (ds, plan)
    }

    fn cfg(sizes: Vec<usize>, epochs: usize, lr: f64) -> TargetConfig {
        TargetConfig {
            layer_sizes: sizes,
            optimizer: OptimizerConfig::adam(lr),
            epochs,
            batch_size: 16,
            snapshot_epochs: vec![],
        }
    }

    #[test]
    fn separable_data_is_fit_exactly() {
        let (ds, plan) = separable();
        let out = train_target(&ds, &plan, &cfg(vec![2, 2], 50, 0.05), 1).unwrap();
        let first_perfect = out.curve.iter().find(|s| s.train_acc == 1.0).map(|s| s.epoch);
        assert!(first_perfect.is_some_and(|e| e <= 50), "{:?}", out.curve.last());
    }

    #[test]
    fn zero_epochs_is_chance_level() {
        let ds = synth_purchase_like(400, 20, 4, 0.3, 2).unwrap();
        let plan = SplitPlan {
            target_train: (0..200).collect(),
            target_test: (200..400).collect(),
            attack_train_members: vec![],
            attack_train_nonmembers: vec![],
            attack_test_members: vec![],
            attack_test_nonmembers: vec![],
            finetune: vec![],
        };
        let out = train_target(&ds, &plan, &cfg(vec![20, 8, 4], 0, 0.001), 1).unwrap();
        assert_eq!(out.snapshots.len(), 1);
        assert_eq!(out.snapshots[0].epoch, 0);
        assert!((out.curve[0].train_acc - 0.25).abs() < 0.15);
    }

    #[test]
    fn training_is_deterministic_and_snapshots_frozen() {
        let (ds, plan) = separable();
        let mut c = cfg(vec![2, 4, 2], 6, 0.01);
        c.snapshot_epochs = vec![2, 4];
        let a = train_target(&ds, &plan, &c, 7).unwrap();
        let b = train_target(&ds, &plan, &c, 7).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.snapshots, b.snapshots);
        assert_eq!(a.snapshots.iter().map(|s| s.epoch).collect::<Vec<_>>(), vec![2, 4]);
        assert_ne!(a.snapshots[0].params, a.last.params);
    }

    #[test]
    fn rejects_bad_config() {
        let (ds, plan) = separable();
        assert!(train_target(&ds, &plan, &cfg(vec![3, 2], 1, 0.01), 0).is_err());
        assert!(train_target(&ds, &plan, &cfg(vec![2, 3], 1, 0.01), 0).is_err());
        let mut c = cfg(vec![2, 2], 3, 0.01);
        c.snapshot_epochs = vec![4];
        assert!(train_target(&ds, &plan, &c, 0).is_err());
        let empty = SplitPlan { target_train: vec![], ..plan };
        assert!(train_target(&ds, &empty, &cfg(vec![2, 2], 1, 0.01), 0).is_err());
    }

    #[test]
    fn finetune_zero_lr_and_overlap() {
        let (ds, plan) = separable();
        let base = train_target(&ds, &plan, &cfg(vec![2, 2], 2, 0.01), 3).unwrap().last;
        let mut c = cfg(vec![2, 2], 1, 0.0);
        c.batch_size = 64;
        let same = finetune_target(&base, &ds, &[70, 71], &plan.target_train, &c, 1).unwrap();
        assert_eq!(same.params, base.params);
        assert!(finetune_target(&base, &ds, &[5, 70], &plan.target_train, &c, 1).is_err());
    }

    #[test]
    fn finetune_partition_sixty_forty() {
        let train: Vec<usize> = (0..1000).collect();
        let (d, delta) = finetune_partition(&train, 0.6);
        assert_eq!((d.len(), delta.len()), (600, 400));
    }
}
