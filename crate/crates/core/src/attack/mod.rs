//! The inference model: one sub-network per feature kind, an encoder that
//! maps their concatenated outputs to a single membership score, and a
//! decoder used only while training without labels.

mod cluster;
mod train;

pub use cluster::{cluster_membership, ClusterResult};
pub use train::{
    train_supervised, train_unsupervised, write_scores_csv, AttackEpoch, AttackTrainConfig, SupervisedOutcome,
    UnsupervisedOutcome,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MiaError, Result};
use crate::features::AttackFeatures;
use crate::nn::{BackwardTrace, BatchCache, LayerSpec, Network};
use crate::rng::derive_seed;
use crate::snapshot::{read_records, write_records, SnapshotRecord};
use crate::tensor::Tensor;

/// Number of reconstruction targets (see [`AttackFeatures::derived_targets`]).
pub const RECON_TARGETS: usize = 5;

/// Layer sizes of the inference model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackArch {
    /// Dense sizes of the fully connected components.
    pub fcn_sizes: Vec<usize>,
    /// Convolution kernels of the gradient components.
    pub conv_kernels: usize,
    /// Dense sizes after the convolution in the gradient components.
    pub grad_sizes: Vec<usize>,
    /// Encoder sizes; the last must be 1.
    pub encoder_sizes: Vec<usize>,
    /// Hidden sizes of the decoder; its output layer is added.
    pub decoder_hidden: Vec<usize>,
    pub keep_prob: f64,
    pub init_std: f64,
}

impl Default for AttackArch {
    fn default() -> Self {
        AttackArch {
            fcn_sizes: vec![128, 64],
            conv_kernels: 1000,
            grad_sizes: vec![128, 64],
            encoder_sizes: vec![256, 128, 64, 1],
            decoder_hidden: vec![64],
            keep_prob: 0.8,
            init_std: 0.01,
        }
    }
}

impl AttackArch {
    pub fn validate(&self) -> Result<()> {
        if self.fcn_sizes.is_empty() || self.grad_sizes.is_empty() {
            return Err(MiaError::arg("component sizes must be non-empty"));
        }
        if self.encoder_sizes.last() != Some(&1) {
            return Err(MiaError::arg("encoder must end in a single unit"));
        }
        let sizes = self.fcn_sizes.iter().chain(&self.grad_sizes).chain(&self.encoder_sizes);
        if self.conv_kernels == 0 || sizes.chain(&self.decoder_hidden).any(|&s| s == 0) {
            return Err(MiaError::arg("attack layer sizes must be positive"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(MiaError::arg("keep_prob must be in (0, 1]"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(MiaError::arg("init_std must be finite and non-negative"));
        }
        Ok(())
    }

    fn mlp(&self, input: usize, sizes: &[usize], activate_last: bool) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &s) in sizes.iter().enumerate() {
            layers.push(LayerSpec::dense(width, s));
            if activate_last || i + 1 < sizes.len() {
                layers.push(LayerSpec::Relu);
                if self.keep_prob < 1.0 {
                    layers.push(LayerSpec::dropout(self.keep_prob));
                }
            }
            width = s;
        }
        layers
    }

    fn component_layers(&self, kind: ComponentKind, layout: &FeatureLayout) -> Vec<LayerSpec> {
        match kind {
            ComponentKind::Gradient { layer } => {
                let (fan_in, fan_out) = layout.grad_shapes[layer];
                let rows = layout.observations * fan_in;
                let mut layers = vec![
                    LayerSpec::Conv1dRows {
                        rows,
                        width: fan_out,
                        kernels: self.conv_kernels,
                        kernel_width: fan_out,
                        stride: 1,
                    },
                    LayerSpec::Relu,
                ];
                if self.keep_prob < 1.0 {
                    layers.push(LayerSpec::dropout(self.keep_prob));
                }
                layers.extend(self.mlp(rows * self.conv_kernels, &self.grad_sizes, true));
                layers
            }
            _ => self.mlp(layout.input_width(kind), &self.fcn_sizes, true),
        }
    }

    fn component_out(&self, kind: ComponentKind) -> usize {
        match kind {
            ComponentKind::Gradient { .. } => *self.grad_sizes.last().expect("validated"),
            _ => *self.fcn_sizes.last().expect("validated"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    /// Selected gradient `layer` (index into the selection, not the model).
    Gradient { layer: usize },
    LayerOutput { layer: usize },
    Output,
    Loss,
    Label,
}

/// Shapes of the features an attack net consumes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub observations: usize,
    pub grad_shapes: Vec<(usize, usize)>,
    pub output_widths: Vec<usize>,
    pub num_classes: usize,
    pub include_output: bool,
    pub include_loss: bool,
    pub include_label: bool,
}

impl FeatureLayout {
    pub fn of(feat: &AttackFeatures) -> Result<Self> {
        let t = feat.observations();
        let first = feat
            .diagnostics
            .first()
            .ok_or_else(|| MiaError::arg("features hold no observations"))?;
        Ok(FeatureLayout {
            observations: t,
            grad_shapes: feat
                .layer_grads
                .first()
                .map(|g| g.iter().map(|m| (m.shape()[0], m.shape()[1])).collect())
                .unwrap_or_default(),
            output_widths: feat
                .layer_outputs
                .first()
                .map(|h| h.iter().map(Tensor::len).collect())
                .unwrap_or_default(),
            num_classes: first.probs.len(),
            include_output: !feat.output.is_empty(),
            include_loss: !feat.loss.is_empty(),
            include_label: feat.label_onehot.is_some(),
        })
    }

    pub fn components(&self) -> Vec<ComponentKind> {
        let mut kinds: Vec<ComponentKind> = (0..self.grad_shapes.len())
            .map(|layer| ComponentKind::Gradient { layer })
            .collect();
        kinds.extend((0..self.output_widths.len()).map(|layer| ComponentKind::LayerOutput { layer }));
        if self.include_output {
            kinds.push(ComponentKind::Output);
        }
        if self.include_loss {
            kinds.push(ComponentKind::Loss);
        }
        if self.include_label {
            kinds.push(ComponentKind::Label);
        }
        kinds
    }

    pub fn input_width(&self, kind: ComponentKind) -> usize {
        let t = self.observations;
        match kind {
            ComponentKind::Gradient { layer } => {
                let (i, o) = self.grad_shapes[layer];
                t * i * o
            }
            ComponentKind::LayerOutput { layer } => t * self.output_widths[layer],
            ComponentKind::Output => t * self.num_classes,
            ComponentKind::Loss => t,
            ComponentKind::Label => self.num_classes,
        }
    }

    fn check(&self, feat: &AttackFeatures) -> Result<()> {
        let other = FeatureLayout::of(feat)?;
        if &other != self {
            return Err(MiaError::dim(format!(
                "feature layout {other:?} does not match the attack net's {self:?}"
            )));
        }
        let t = self.observations;
        if feat.layer_grads.len() != t
            || feat.layer_outputs.len() != t
            || (self.include_output && feat.output.len() != t)
            || (self.include_loss && feat.loss.len() != t)
        {
            return Err(MiaError::dim("feature lists differ in observation count"));
        }
        Ok(())
    }

    /// Appends the raw input of component `kind` for one example; gradient
    /// matrices of successive observations stack as extra rows.
    fn push_input(&self, kind: ComponentKind, feat: &AttackFeatures, out: &mut Vec<f64>) {
        match kind {
            ComponentKind::Gradient { layer } => feat.layer_grads.iter().for_each(|g| out.extend_from_slice(g[layer].data())),
            ComponentKind::LayerOutput { layer } => {
                feat.layer_outputs.iter().for_each(|h| out.extend_from_slice(h[layer].data()))
            }
            ComponentKind::Output => feat.output.iter().for_each(|p| out.extend_from_slice(p.data())),
            ComponentKind::Loss => out.extend_from_slice(&feat.loss),
            ComponentKind::Label => out.extend_from_slice(feat.label_onehot.as_ref().expect("checked").data()),
        }
    }
}

/// Per-input standardization fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Scaler {
    /// Constant inputs are centred but not rescaled.
    pub fn fit(rows: &[f64], width: usize) -> Self {
        let n = (rows.len() / width).max(1) as f64;
        let mut mean = vec![0.0; width];
        for r in rows.chunks_exact(width) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for r in rows.chunks_exact(width) {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let inv_std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Scaler { mean, inv_std }
    }

    fn apply(&self, rows: &mut [f64]) {
        let w = self.mean.len();
        for r in rows.chunks_exact_mut(w) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    Supervised,
    Unsupervised,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub kind: ComponentKind,
    pub net: Network,
    pub scaler: Option<Scaler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackNet {
    pub arch: AttackArch,
    pub layout: FeatureLayout,
    pub knowledge: Knowledge,
    pub components: Vec<Component>,
    pub encoder: Network,
    /// Present only while training without labels.
    pub decoder: Option<Network>,
}

/// Component inputs for a set of examples, already standardized.
#[derive(Clone, Debug)]
pub struct EncodedFeatures {
    pub len: usize,
    inputs: Vec<Vec<f64>>,
    widths: Vec<usize>,
}

impl EncodedFeatures {
    fn gather(&self, c: usize, rows: &[usize]) -> Vec<f64> {
        let w = self.widths[c];
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&self.inputs[c][r * w..(r + 1) * w]);
        }
        out
    }
}

pub(crate) struct AttackCache {
    comps: Vec<BatchCache>,
    enc: BatchCache,
    dec: Option<BatchCache>,
}

impl AttackCache {
    /// Raw encoder outputs, one per example.
    pub(crate) fn embedding(&self) -> &[f64] {
        self.enc.output()
    }

    pub(crate) fn recon(&self) -> Option<&[f64]> {
        self.dec.as_ref().map(BatchCache::output)
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl AttackNet {
    /// Randomly initialized net for features shaped like `layout`.
    pub fn new(arch: AttackArch, layout: FeatureLayout, knowledge: Knowledge, seed: u64) -> Result<Self> {
        Self::build(arch, layout, knowledge, |c, layers, std| Network::with_init(layers, derive_seed(seed, &[c]), std))
    }

    /// All parameters zero: every score is 0.5 (supervised) or 0.
    pub fn zeros(arch: AttackArch, layout: FeatureLayout, knowledge: Knowledge) -> Result<Self> {
        Self::build(arch, layout, knowledge, |_, layers, _| Network::zeros(layers))
    }

    fn build(
        arch: AttackArch,
        layout: FeatureLayout,
        knowledge: Knowledge,
        make: impl Fn(u64, Vec<LayerSpec>, f64) -> Result<Network>,
    ) -> Result<Self> {
        arch.validate()?;
        let kinds = layout.components();
        if kinds.is_empty() {
            return Err(MiaError::arg("feature selection is empty"));
        }
        let mut components = Vec::with_capacity(kinds.len());
        let mut concat = 0;
        for (c, &kind) in kinds.iter().enumerate() {
            let net = make(c as u64, arch.component_layers(kind, &layout), arch.init_std)?;
            concat += arch.component_out(kind);
            components.push(Component { kind, net, scaler: None });
        }
        let n = kinds.len() as u64;
        let encoder = make(n, arch.mlp(concat, &arch.encoder_sizes, false), arch.init_std)?;
        let decoder = match knowledge {
            Knowledge::Supervised => None,
            Knowledge::Unsupervised => {
                let mut sizes = arch.decoder_hidden.clone();
                sizes.push(RECON_TARGETS);
                // no dropout: reconstructions should be exact at the optimum
                let plain = AttackArch { keep_prob: 1.0, ..arch.clone() };
                // fan-in scaled: with the small default init the signal
                // through a scalar bottleneck vanishes below Adam's epsilon
                let mut dec = make(n + 1, plain.mlp(1, &sizes, false), 1.0)?;
                for w in dec.params_mut().iter_mut().filter(|p| p.shape().len() == 2) {
                    let fan_in = w.shape()[0] as f64;
                    w.scale(1.0 / fan_in.sqrt());
                }
                Some(dec)
            }
        };
        Ok(AttackNet {
            arch,
            layout,
            knowledge,
            components,
            encoder,
            decoder,
        })
    }

    /// Sub-networks in a fixed order: components, encoder, decoder.
    pub fn networks(&self) -> Vec<&Network> {
        let mut v: Vec<&Network> = self.components.iter().map(|c| &c.net).collect();
        v.push(&self.encoder);
        v.extend(self.decoder.as_ref());
        v
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Network> {
        let mut v: Vec<&mut Network> = self.components.iter_mut().map(|c| &mut c.net).collect();
        v.push(&mut self.encoder);
        v.extend(self.decoder.as_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|n| n.num_params()).sum()
    }

    /// Fits per-input standardization on `feats`.
    pub fn fit_scalers(&mut self, feats: &[AttackFeatures]) -> Result<()> {
        let raw = self.raw_inputs(feats)?;
        for (c, comp) in self.components.iter_mut().enumerate() {
            let w = self.layout.input_width(comp.kind);
            comp.scaler = Some(Scaler::fit(&raw[c], w));
        }
        Ok(())
    }

    fn raw_inputs(&self, feats: &[AttackFeatures]) -> Result<Vec<Vec<f64>>> {
        let mut inputs: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|c| Vec::with_capacity(feats.len() * self.layout.input_width(c.kind)))
            .collect();
        for f in feats {
            self.layout.check(f)?;
            for (c, comp) in self.components.iter().enumerate() {
                self.layout.push_input(comp.kind, f, &mut inputs[c]);
            }
        }
        Ok(inputs)
    }

    pub fn encode(&self, feats: &[AttackFeatures]) -> Result<EncodedFeatures> {
        let mut inputs = self.raw_inputs(feats)?;
        for (c, comp) in self.components.iter().enumerate() {
            if let Some(s) = &comp.scaler {
                s.apply(&mut inputs[c]);
            }
        }
        Ok(EncodedFeatures {
            len: feats.len(),
            inputs,
            widths: self.components.iter().map(|c| self.layout.input_width(c.kind)).collect(),
        })
    }

    pub(crate) fn forward_rows(
        &self,
        enc: &EncodedFeatures,
        rows: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<AttackCache> {
        let batch = rows.len();
        let seed = |c: usize| dropout_seed.map(|s| derive_seed(s, &[c as u64]));
        let mut comps = Vec::with_capacity(self.components.len());
        for (c, comp) in self.components.iter().enumerate() {
            comps.push(comp.net.forward_batch(&enc.gather(c, rows), batch, seed(c))?);
        }
        let widths: Vec<usize> = self.components.iter().map(|c| c.net.output_dim()).collect();
        let concat_w: usize = widths.iter().sum();
        let mut concat = Vec::with_capacity(batch * concat_w);
        for b in 0..batch {
            for (cache, &w) in comps.iter().zip(&widths) {
                concat.extend_from_slice(&cache.output()[b * w..(b + 1) * w]);
            }
        }
        let n = self.components.len();
        let enc_cache = self.encoder.forward_batch(&concat, batch, seed(n))?;
        let dec = match &self.decoder {
            Some(d) => Some(d.forward_batch(enc_cache.output(), batch, seed(n + 1))?),
            None => None,
        };
        Ok(AttackCache {
            comps,
            enc: enc_cache,
            dec,
        })
    }

    /// Gradients for every sub-network in [`Self::networks`] order, given
    /// the loss gradient w.r.t. the raw encoder output and, if a decoder is
    /// attached, w.r.t. its reconstructions.
    pub(crate) fn backward(
        &self,
        cache: &AttackCache,
        mut d_embed: Vec<f64>,
        d_recon: Option<Vec<f64>>,
    ) -> Result<Vec<BackwardTrace>> {
        let batch = d_embed.len();
        let mut dec_trace = None;
        if let (Some(dec), Some(dcache), Some(dr)) = (&self.decoder, &cache.dec, d_recon) {
            let (t, dx) = dec.backward_batch(dcache, dr, true)?;
            d_embed.iter_mut().zip(dx.expect("requested")).for_each(|(a, b)| *a += b);
            dec_trace = Some(t);
        }
        let (enc_trace, dx) = self.encoder.backward_batch(&cache.enc, d_embed, true)?;
        let dx = dx.expect("requested");
        let widths: Vec<usize> = self.components.iter().map(|c| c.net.output_dim()).collect();
        let concat_w: usize = widths.iter().sum();
        let mut traces = Vec::with_capacity(self.components.len() + 2);
        let mut offset = 0;
        for ((comp, ccache), &w) in self.components.iter().zip(&cache.comps).zip(&widths) {
            let mut d = Vec::with_capacity(batch * w);
            for b in 0..batch {
                d.extend_from_slice(&dx[b * concat_w + offset..b * concat_w + offset + w]);
            }
            offset += w;
            traces.push(comp.net.backward_batch(ccache, d, false)?.0);
        }
        traces.push(enc_trace);
        traces.extend(dec_trace);
        Ok(traces)
    }

    /// Membership scores with dropout off: a probability for supervised
    /// nets, the raw embedding otherwise.
    pub fn scores_encoded(&self, enc: &EncodedFeatures) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(enc.len);
        let all: Vec<usize> = (0..enc.len).collect();
        for rows in all.chunks(256) {
            let cache = self.forward_rows(enc, rows, None)?;
            out.extend(cache.embedding().iter().map(|&z| self.squash(z)));
        }
        Ok(out)
    }

    pub fn scores(&self, feats: &[AttackFeatures]) -> Result<Vec<f64>> {
        self.scores_encoded(&self.encode(feats)?)
    }

    fn squash(&self, z: f64) -> f64 {
        match self.knowledge {
            Knowledge::Supervised => logistic(z),
            Knowledge::Unsupervised => z,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path, &self.to_records()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(read_records(path)?)
    }

    pub fn to_records(&self) -> Result<Vec<SnapshotRecord>> {
        let meta = AttackMeta {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            knowledge: self.knowledge,
            components: self.components.iter().map(|c| c.kind).collect(),
            has_decoder: self.decoder.is_some(),
        };
        let rec = |tag: String, meta: String, net: &Network| SnapshotRecord {
            tag,
            epoch: 0,
            meta,
            arch: net.layers().to_vec(),
            params: net.params().to_vec(),
        };
        let mut records = vec![rec("encoder".into(), serde_json::to_string(&meta)?, &self.encoder)];
        if let Some(d) = &self.decoder {
            records.push(rec("decoder".into(), String::new(), d));
        }
        for (c, comp) in self.components.iter().enumerate() {
            records.push(rec(format!("component{c}"), String::new(), &comp.net));
            if let Some(s) = &comp.scaler {
                records.push(SnapshotRecord {
                    tag: format!("scaler{c}"),
                    epoch: 0,
                    meta: String::new(),
                    arch: Vec::new(),
                    params: vec![Tensor::vector(s.mean.clone()), Tensor::vector(s.inv_std.clone())],
                });
            }
        }
        Ok(records)
    }

    pub fn from_records(records: Vec<SnapshotRecord>) -> Result<Self> {
        let head = records
            .first()
            .filter(|r| r.tag == "encoder")
            .ok_or_else(|| MiaError::Malformed("attack file must start with the encoder record".into()))?;
        let meta: AttackMeta = serde_json::from_str(&head.meta)?;
        let mut net = AttackNet::zeros(meta.arch, meta.layout, meta.knowledge)?;
        if net.components.iter().map(|c| c.kind).ne(meta.components.iter().copied()) {
            return Err(MiaError::Malformed("component list does not match the feature layout".into()));
        }
        if !meta.has_decoder {
            net.decoder = None;
        }
        let load = |r: &SnapshotRecord, target: &mut Network| -> Result<()> {
            if r.arch != target.layers() {
                return Err(MiaError::Malformed(format!("record {} has an unexpected architecture", r.tag)));
            }
            *target = Network::from_params(r.arch.clone(), r.params.clone())?;
            Ok(())
        };
        for r in &records {
            match r.tag.as_str() {
                "encoder" => load(r, &mut net.encoder)?,
                "decoder" => match net.decoder.as_mut() {
                    Some(d) => load(r, d)?,
                    None => return Err(MiaError::Malformed("unexpected decoder record".into())),
                },
                tag => {
                    let (c, is_scaler) = if let Some(c) = tag.strip_prefix("component") {
                        (c, false)
                    } else if let Some(c) = tag.strip_prefix("scaler") {
                        (c, true)
                    } else {
                        return Err(MiaError::Malformed(format!("unknown record tag {tag}")));
                    };
                    let c: usize = c.parse().map_err(|_| MiaError::Malformed(format!("bad record tag {tag}")))?;
                    let comp = net
                        .components
                        .get_mut(c)
                        .ok_or_else(|| MiaError::Malformed(format!("record {tag} out of range")))?;
                    if is_scaler {
                        let w = net.layout.input_width(comp.kind);
                        if r.params.len() != 2 || r.params.iter().any(|t| t.len() != w) {
                            return Err(MiaError::Malformed(format!("record {tag} has the wrong width")));
                        }
                        comp.scaler = Some(Scaler {
                            mean: r.params[0].data().to_vec(),
                            inv_std: r.params[1].data().to_vec(),
                        });
                    } else {
                        load(r, &mut comp.net)?;
                    }
                }
            }
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct AttackMeta {
    arch: AttackArch,
    layout: FeatureLayout,
    knowledge: Knowledge,
    components: Vec<ComponentKind>,
    has_decoder: bool,
}

/// Score of one example, plus reconstructions when a decoder is attached.
pub fn attack_forward(net: &AttackNet, feat: &AttackFeatures) -> Result<(f64, Option<[f64; RECON_TARGETS]>)> {
    let enc = net.encode(std::slice::from_ref(feat))?;
    let cache = net.forward_rows(&enc, &[0], None)?;
    let score = net.squash(cache.embedding()[0]);
    let recon = cache.recon().map(|r| {
        let mut a = [0.0; RECON_TARGETS];
        a.copy_from_slice(r);
        a
    });
    Ok((score, recon))
}
