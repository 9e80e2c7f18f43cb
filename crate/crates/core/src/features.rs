//! White-box observations of a target model on one labelled example.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MiaError, Result};
use crate::nn::{argmax, Network};
use crate::snapshot::ModelSnapshot;
use crate::tensor::Tensor;

/// A set of parametric-layer ordinals (0 = first dense layer).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSet {
    None,
    Last,
    LastK(usize),
    All,
    Indices(Vec<usize>),
}

impl LayerSet {
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>> {
        Ok(match self {
            LayerSet::None => Vec::new(),
            LayerSet::Last => vec![layers - 1],
            LayerSet::LastK(k) => (layers.saturating_sub(*k)..layers).collect(),
            LayerSet::All => (0..layers).collect(),
            LayerSet::Indices(v) => {
                if let Some(bad) = v.iter().find(|&&i| i >= layers) {
                    return Err(MiaError::Range(format!(
                        "layer {bad} out of range for {layers} dense layers"
                    )));
                }
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        })
    }
}

/// Which observations feed the attack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub grad_layers: LayerSet,
    pub output_layers: LayerSet,
    pub include_loss: bool,
    pub include_label: bool,
    pub include_output: bool,
}

impl FeatureSelection {
    /// Last-layer gradient, model output, loss and label.
    pub fn white_box() -> Self {
        FeatureSelection {
            grad_layers: LayerSet::Last,
            output_layers: LayerSet::None,
            include_loss: true,
            include_label: true,
            include_output: true,
        }
    }

    /// Only the prediction vector: what a black-box observer sees.
    pub fn output_only() -> Self {
        FeatureSelection {
            grad_layers: LayerSet::None,
            output_layers: LayerSet::None,
            include_loss: false,
            include_label: false,
            include_output: true,
        }
    }

    pub fn loss_only() -> Self {
        FeatureSelection {
            include_loss: true,
            include_output: false,
            ..FeatureSelection::output_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let any = self.grad_layers != LayerSet::None
            || self.output_layers != LayerSet::None
            || self.include_loss
            || self.include_label
            || self.include_output;
        if any {
            Ok(())
        } else {
            Err(MiaError::arg("feature selection enables no feature"))
        }
    }
}

impl Default for FeatureSelection {
    fn default() -> Self {
        FeatureSelection::white_box()
    }
}

/// Quantities always recorded per observed snapshot, whatever the
/// selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub epoch: u64,
    pub probs: Tensor,
    pub loss: f64,
    /// Norm of the last layer's weight and bias gradients.
    pub grad_norm: f64,
}

/// Selected observations of one example over `T` snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackFeatures {
    /// `[t][k]`: gradient of the k-th selected layer's weights, shaped
    /// `[fan_in, fan_out]`.
    pub layer_grads: Vec<Vec<Tensor>>,
    /// `[t][k]`: post-activation output of the k-th selected layer.
    pub layer_outputs: Vec<Vec<Tensor>>,
    /// `[t]`: softmax output, empty unless selected.
    pub output: Vec<Tensor>,
    /// `[t]`: loss, empty unless selected.
    pub loss: Vec<f64>,
    pub label_onehot: Option<Tensor>,
    pub label: usize,
    pub diagnostics: Vec<Diagnostics>,
}

impl AttackFeatures {
    pub fn observations(&self) -> usize {
        self.diagnostics.len()
    }

    /// Number of scalar values across all selected features.
    pub fn scalar_count(&self) -> usize {
        let nested = |v: &Vec<Vec<Tensor>>| v.iter().flatten().map(Tensor::len).sum::<usize>();
        nested(&self.layer_grads)
            + nested(&self.layer_outputs)
            + self.output.iter().map(Tensor::len).sum::<usize>()
            + self.loss.len()
            + self.label_onehot.as_ref().map_or(0, Tensor::len)
    }

    /// Reconstruction targets at the latest observation.
    pub fn derived_targets(&self) -> [f64; 5] {
        let last = self.diagnostics.last().expect("at least one observation");
        derived_targets(self, last.probs.data(), self.label)
    }
}

/// `(loss, correct, confidence on true label, normalized entropy,
/// gradient norm)`; loss and gradient norm come from the latest
/// observation in `feat`.
pub fn derived_targets(feat: &AttackFeatures, probs: &[f64], y: usize) -> [f64; 5] {
    let last = feat.diagnostics.last().expect("at least one observation");
    let correct = if argmax(probs) == y { 1.0 } else { 0.0 };
    [last.loss, correct, probs[y], normalized_entropy(probs), last.grad_norm]
}

/// `-(1 / ln K) * sum p ln p`, in [0, 1]; `0 ln 0 = 0`.
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    let k = probs.len();
    if k < 2 {
        return 0.0;
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    (h / (k as f64).ln()).clamp(0.0, 1.0)
}

/// Extracts features for many examples against a fixed set of snapshots.
pub struct FeatureExtractor {
    nets: Vec<Network>,
    epochs: Vec<u64>,
    selection: FeatureSelection,
    grad_layers: Vec<usize>,
    output_layers: Vec<usize>,
    /// Layer index from which backpropagation is needed.
    min_layer: usize,
}

impl FeatureExtractor {
    pub fn new(snapshots: &[ModelSnapshot], selection: FeatureSelection) -> Result<Self> {
        selection.validate()?;
        let first = snapshots
            .first()
            .ok_or_else(|| MiaError::arg("need at least one snapshot"))?;
        if snapshots.iter().any(|s| s.arch != first.arch) {
            return Err(MiaError::arg("snapshots do not share one architecture"));
        }
        let nets = snapshots
            .iter()
            .map(ModelSnapshot::to_network)
            .collect::<Result<Vec<_>>>()?;
        let parametric = nets[0].parametric_layers();
        let grad_layers = selection.grad_layers.resolve(parametric.len())?;
        let output_layers = selection.output_layers.resolve(parametric.len())?;
        let last = *parametric.last().expect("network has a dense layer");
        let min_layer = grad_layers.iter().map(|&o| parametric[o]).min().unwrap_or(last).min(last);
        Ok(FeatureExtractor {
            nets,
            epochs: snapshots.iter().map(|s| s.epoch).collect(),
            selection,
            grad_layers,
            output_layers,
            min_layer,
        })
    }

    pub fn selection(&self) -> &FeatureSelection {
        &self.selection
    }

    pub fn observations(&self) -> usize {
        self.nets.len()
    }

    /// `(fan_in, fan_out)` of every selected gradient layer.
    pub fn grad_shapes(&self) -> Vec<(usize, usize)> {
        let params = self.nets[0].params();
        self.grad_layers
            .iter()
            .map(|&o| (params[2 * o].shape()[0], params[2 * o].shape()[1]))
            .collect()
    }

    /// Width of every selected layer output.
    pub fn output_widths(&self) -> Vec<usize> {
        let net = &self.nets[0];
        self.output_layers.iter().map(|&o| net.params()[2 * o + 1].len()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.nets[0].output_dim()
    }

    pub fn extract(&self, x: &Tensor, y: usize) -> Result<AttackFeatures> {
        let classes = self.num_classes();
        if y >= classes {
            return Err(MiaError::Range(format!("label {y} >= {classes} classes")));
        }
        let sel = &self.selection;
        let mut feat = AttackFeatures {
            layer_grads: Vec::new(),
            layer_outputs: Vec::new(),
            output: Vec::new(),
            loss: Vec::new(),
            label_onehot: sel.include_label.then(|| {
                let mut v = vec![0.0; classes];
                v[y] = 1.0;
                Tensor::vector(v)
            }),
            label: y,
            diagnostics: Vec::new(),
        };
        for (net, &epoch) in self.nets.iter().zip(&self.epochs) {
            let (trace, grads) = net.loss_and_grads_from(x, y, self.min_layer)?;
            let loss = trace.loss.expect("loss computed with a label");
            let last_ordinal = net.parametric_layers().len() - 1;
            let grad_norm = [2 * last_ordinal, 2 * last_ordinal + 1]
                .iter()
                .map(|&j| grads[j].as_ref().map_or(0.0, Tensor::norm_sq))
                .sum::<f64>()
                .sqrt();
            let mut g_t = Vec::with_capacity(self.grad_layers.len());
            for &o in &self.grad_layers {
                g_t.push(grads[2 * o].clone().expect("gradient computed for selected layer"));
            }
            let mut h_t = Vec::with_capacity(self.output_layers.len());
            for &o in &self.output_layers {
                let layer = net.block_output_layer(o).expect("ordinal resolved");
                h_t.push(trace.activations[layer].clone());
            }
            feat.layer_grads.push(g_t);
            feat.layer_outputs.push(h_t);
            if sel.include_output {
                feat.output.push(trace.probs.clone());
            }
            if sel.include_loss {
                feat.loss.push(loss);
            }
            feat.diagnostics.push(Diagnostics {
                epoch,
                probs: trace.probs,
                loss,
                grad_norm,
            });
        }
        Ok(feat)
    }

    pub fn extract_many(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<AttackFeatures>> {
        idx.iter().map(|&i| self.extract(&ds.example(i), ds.labels[i])).collect()
    }
}

/// Convenience wrapper around [`FeatureExtractor`] for a single example.
pub fn extract(snapshots: &[ModelSnapshot], x: &Tensor, y: usize, sel: &FeatureSelection) -> Result<AttackFeatures> {
    FeatureExtractor::new(snapshots, sel.clone())?.extract(x, y)
}

/// Writes one row per (example, observation) with the selected features
/// flattened: `example,t,epoch,label,loss,grad_norm,f0,f1,...`.
pub fn write_feature_dump(path: impl AsRef<Path>, rows: &[(usize, &AttackFeatures)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let Some((_, first)) = rows.first() else {
        w.write_record(["example", "t", "epoch", "label", "loss", "grad_norm"])?;
        w.flush()?;
        return Ok(());
    };
    let width = flat_row(first, 0).len();
    let mut header: Vec<String> = ["example", "t", "epoch", "label", "loss", "grad_norm"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..width).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (id, feat) in rows {
        for (t, d) in feat.diagnostics.iter().enumerate() {
            let mut rec = vec![
                id.to_string(),
                t.to_string(),
                d.epoch.to_string(),
                feat.label.to_string(),
                d.loss.to_string(),
                d.grad_norm.to_string(),
            ];
            rec.extend(flat_row(feat, t).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn flat_row(feat: &AttackFeatures, t: usize) -> Vec<f64> {
    let mut v = Vec::new();
    feat.layer_grads[t].iter().for_each(|g| v.extend_from_slice(g.data()));
    feat.layer_outputs[t].iter().for_each(|h| v.extend_from_slice(h.data()));
    if let Some(o) = feat.output.get(t) {
        v.extend_from_slice(o.data());
    }
    if let Some(l) = feat.loss.get(t) {
        v.push(*l);
    }
    if let Some(y) = &feat.label_onehot {
        v.extend_from_slice(y.data());
    }
    v
}
