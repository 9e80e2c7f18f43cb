use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::layer::LayerSpec;
use super::{cross_entropy, softmax};
use crate::error::{MiaError, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{ensure_finite, Tensor};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.01;

/// Feed-forward network: an ordered list of layers and their parameters.
///
/// Parameters are stored weight-then-bias for every dense or conv layer, in
/// layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
    /// Index of the weight tensor in `params` for each layer that has one.
    param_index: Vec<Option<usize>>,
    input_dim: usize,
    output_dim: usize,
    rng_seed: u64,
}

/// Activations cached by a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchCache {
    batch: usize,
    /// `acts[0]` is the input; `acts[i + 1]` is the output of layer `i`.
    acts: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl BatchCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache always holds the input")
    }

    /// Output of layer `i`, `[batch, width]` flattened.
    pub fn layer_output(&self, i: usize) -> &[f64] {
        &self.acts[i + 1]
    }
}

/// Everything a single-example forward pass computes.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Output of every layer, in order.
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
    /// Cross-entropy at the true label, when one was supplied.
    pub loss: Option<f64>,
}

/// Parameter gradients aligned with [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardTrace {
    pub param_grads: Vec<Tensor>,
    /// Ordinal of the parametric layer that owns each gradient tensor.
    pub param_layer: Vec<usize>,
}

/// Which gradient tensors [`gradient_norm`] reduces over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSelector {
    All,
    Last,
    /// Ordinal among parametric (dense/conv) layers.
    Index(usize),
}

impl Network {
    /// Builds a network with weights drawn from N(0, 0.01²) and zero biases.
    pub fn new(layers: Vec<LayerSpec>, rng_seed: u64) -> Result<Self> {
        Self::with_init(layers, rng_seed, INIT_STD)
    }

    pub fn with_init(layers: Vec<LayerSpec>, rng_seed: u64, std: f64) -> Result<Self> {
        let (param_index, input_dim, output_dim) = Self::plan(&layers)?;
        let mut rng = rng_for(rng_seed, &[stream::INIT]);
        let normal = Normal::new(0.0, std).map_err(|e| MiaError::arg(e.to_string()))?;
        let mut params = Vec::new();
        for layer in &layers {
            let mut shapes = layer.param_shapes().into_iter();
            if let (Some(w), Some(b)) = (shapes.next(), shapes.next()) {
                let n: usize = w.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                params.push(Tensor::new(w, data)?);
                params.push(Tensor::zeros(&b));
            }
        }
        Ok(Network {
            layers,
            params,
            param_index,
            input_dim,
            output_dim,
            rng_seed,
        })
    }

    /// All parameters zero.
    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        Self::with_init(layers, 0, 0.0)
    }

    pub fn from_params(layers: Vec<LayerSpec>, params: Vec<Tensor>) -> Result<Self> {
        let (param_index, input_dim, output_dim) = Self::plan(&layers)?;
        let expected: Vec<Vec<usize>> = layers.iter().flat_map(|l| l.param_shapes()).collect();
        if expected.len() != params.len() {
            return Err(MiaError::dim(format!(
                "architecture has {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (shape, p)) in expected.iter().zip(&params).enumerate() {
            if shape.as_slice() != p.shape() {
                return Err(MiaError::dim(format!(
                    "parameter {i}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Network {
            layers,
            params,
            param_index,
            input_dim,
            output_dim,
            rng_seed: 0,
        })
    }

    fn plan(layers: &[LayerSpec]) -> Result<(Vec<Option<usize>>, usize, usize)> {
        let first = layers
            .first()
            .ok_or_else(|| MiaError::arg("network needs at least one layer"))?;
        let input_dim = first
            .in_dim()
            .ok_or_else(|| MiaError::arg("first layer must be dense or conv"))?;
        let mut width = input_dim;
        let mut next_param = 0;
        let mut index = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if let Some(d) = layer.in_dim() {
                if d != width {
                    return Err(MiaError::dim(format!(
                        "layer {i} expects input width {d}, previous layer yields {width}"
                    )));
                }
            }
            if layer.has_params() {
                index.push(Some(next_param));
                next_param += 2;
            } else {
                index.push(None);
            }
            width = layer.out_dim(width);
        }
        Ok((index, input_dim, width))
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Layer indices of the dense/conv layers, in order.
    pub fn parametric_layers(&self) -> Vec<usize> {
        self.param_index
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|_| i))
            .collect()
    }

    /// Index of the layer whose output is the "post-activation" output of
    /// parametric layer `ordinal`: the last ReLU/dropout directly following
    /// it, or the layer itself.
    pub fn block_output_layer(&self, ordinal: usize) -> Option<usize> {
        let start = *self.parametric_layers().get(ordinal)?;
        let mut end = start;
        while end + 1 < self.layers.len() && !self.layers[end + 1].has_params() {
            end += 1;
        }
        Some(end)
    }

    /// Batched forward pass over `batch` row-major examples.
    ///
    /// Dropout is active only when `dropout_seed` is given.
    pub fn forward_batch(
        &self,
        x: &[f64],
        batch: usize,
        dropout_seed: Option<u64>,
    ) -> Result<BatchCache> {
        if batch == 0 || x.len() != batch * self.input_dim {
            return Err(MiaError::dim(format!(
                "input has {} values, expected {batch} x {}",
                x.len(),
                self.input_dim
            )));
        }
        ensure_finite(x, "network input")?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut masks = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = acts.last().expect("non-empty");
            let mut mask = None;
            let out = match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let p = self.param_index[i].expect("dense has params");
                    let (w, b) = (self.params[p].data(), self.params[p + 1].data());
                    let mut out = Vec::with_capacity(batch * out_dim);
                    for _ in 0..batch {
                        out.extend_from_slice(b);
                    }
                    gemm(batch, in_dim, out_dim, input, false, w, false, &mut out, 1.0);
                    out
                }
                LayerSpec::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
                LayerSpec::Dropout { keep_prob } => match dropout_seed {
                    Some(seed) if keep_prob < 1.0 => {
                        let mut rng = rng_for(seed, &[stream::DROPOUT, i as u64]);
                        let scale = 1.0 / keep_prob;
                        let m: Vec<f64> = (0..input.len())
                            .map(|_| {
                                if rng.gen::<f64>() < keep_prob {
                                    scale
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let out = input.iter().zip(&m).map(|(a, b)| a * b).collect();
                        mask = Some(m);
                        out
                    }
                    _ => input.clone(),
                },
                LayerSpec::Conv1dRows { kernels, kernel_width, .. } => {
                    let p = self.param_index[i].expect("conv has params");
                    let (k, b) = (self.params[p].data(), self.params[p + 1].data());
                    let patches = im2col(layer, input, batch);
                    let rows = patches.len() / kernel_width;
                    let mut out = Vec::with_capacity(rows * kernels);
                    for _ in 0..rows {
                        out.extend_from_slice(b);
                    }
                    gemm(rows, kernel_width, kernels, &patches, false, k, false, &mut out, 1.0);
                    out
                }
            };
            width = layer.out_dim(width);
            debug_assert_eq!(out.len(), batch * width);
            ensure_finite(&out, &format!("layer {i} output"))?;
            acts.push(out);
            masks.push(mask);
        }
        Ok(BatchCache { batch, acts, masks })
    }

    /// Backpropagates `dout` (gradient w.r.t. the batched network output)
    /// and returns gradients summed over the batch plus the gradient w.r.t.
    /// the input.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        dout: Vec<f64>,
        need_input_grad: bool,
    ) -> Result<(BackwardTrace, Option<Vec<f64>>)> {
        let (grads, dx) = self.backward_partial(cache, dout, 0, need_input_grad)?;
        let param_grads = grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((
            BackwardTrace {
                param_grads,
                param_layer: self.param_layer_map(),
            },
            dx,
        ))
    }

    fn param_layer_map(&self) -> Vec<usize> {
        (0..self.params.len()).map(|j| j / 2).collect()
    }

    /// Backward pass that skips every layer below `min_layer` unless the
    /// input gradient is requested. Skipped parameter gradients are `None`.
    pub fn backward_partial(
        &self,
        cache: &BatchCache,
        dout: Vec<f64>,
        min_layer: usize,
        need_input_grad: bool,
    ) -> Result<(Vec<Option<Tensor>>, Option<Vec<f64>>)> {
        let batch = cache.batch;
        if dout.len() != batch * self.output_dim {
            return Err(MiaError::dim(format!(
                "output gradient has {} values, expected {batch} x {}",
                dout.len(),
                self.output_dim
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut g = dout;
        for i in (0..self.layers.len()).rev() {
            let stop_after = i <= min_layer && !need_input_grad;
            let input = &cache.acts[i];
            let needs_dx = i > 0 || need_input_grad;
            match self.layers[i] {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let p = self.param_index[i].expect("dense has params");
                    let mut dw = vec![0.0; in_dim * out_dim];
                    gemm(in_dim, batch, out_dim, input, true, &g, false, &mut dw, 0.0);
                    let db = col_sums(&g, out_dim);
                    grads[p] = Some(Tensor::new(vec![in_dim, out_dim], dw)?);
                    grads[p + 1] = Some(Tensor::vector(db));
                    if needs_dx && !stop_after {
                        let mut dx = vec![0.0; batch * in_dim];
                        let w = self.params[p].data();
                        gemm(batch, out_dim, in_dim, &g, false, w, true, &mut dx, 0.0);
                        g = dx;
                    }
                }
                LayerSpec::Relu => {
                    let out = &cache.acts[i + 1];
                    for (gv, &o) in g.iter_mut().zip(out) {
                        if o <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                LayerSpec::Dropout { .. } => {
                    if let Some(mask) = &cache.masks[i] {
                        g.iter_mut().zip(mask).for_each(|(gv, m)| *gv *= m);
                    }
                }
                ref conv @ LayerSpec::Conv1dRows {
                    kernels,
                    kernel_width,
                    ..
                } => {
                    let p = self.param_index[i].expect("conv has params");
                    let patches = im2col(conv, input, batch);
                    let rows = patches.len() / kernel_width;
                    let mut dk = vec![0.0; kernel_width * kernels];
                    gemm(kernel_width, rows, kernels, &patches, true, &g, false, &mut dk, 0.0);
                    let db = col_sums(&g, kernels);
                    grads[p] = Some(Tensor::new(vec![kernel_width, kernels], dk)?);
                    grads[p + 1] = Some(Tensor::vector(db));
                    if needs_dx && !stop_after {
                        let mut dpatch = vec![0.0; rows * kernel_width];
                        let k = self.params[p].data();
                        gemm(rows, kernels, kernel_width, &g, false, k, true, &mut dpatch, 0.0);
                        g = col2im(conv, &dpatch, batch);
                    }
                }
            }
            if stop_after {
                break;
            }
        }
        for (j, g) in grads.iter().enumerate() {
            if let Some(t) = g {
                ensure_finite(t.data(), &format!("gradient of parameter {j}"))?;
            }
        }
        Ok((grads, need_input_grad.then_some(g)))
    }

    /// Single-example forward pass exposing every intermediate.
    pub fn forward(&self, x: &Tensor, train_mode: bool, dropout_seed: u64) -> Result<ForwardTrace> {
        let cache = self.forward_batch(x.data(), 1, train_mode.then_some(dropout_seed))?;
        Ok(self.trace_from_cache(&cache, None))
    }

    fn trace_from_cache(&self, cache: &BatchCache, loss: Option<f64>) -> ForwardTrace {
        let activations = cache.acts[1..].iter().map(|a| Tensor::vector(a.clone())).collect();
        let logits = cache.output().to_vec();
        let probs = softmax(&logits);
        ForwardTrace {
            activations,
            logits: Tensor::vector(logits),
            probs: Tensor::vector(probs),
            loss,
        }
    }

    /// Softmax cross-entropy at class `y` and its exact parameter gradient
    /// (dropout off).
    pub fn loss_and_backward(&self, x: &Tensor, y: usize) -> Result<(ForwardTrace, BackwardTrace)> {
        self.loss_and_backward_l2(x, y, 0.0)
    }

    /// As [`Network::loss_and_backward`], adding `l2/2 * sum ||p||^2` over
    /// all parameters to the loss.
    pub fn loss_and_backward_l2(
        &self,
        x: &Tensor,
        y: usize,
        l2: f64,
    ) -> Result<(ForwardTrace, BackwardTrace)> {
        let (trace, grads) = self.loss_and_grads_from(x, y, 0)?;
        let mut param_grads: Vec<Tensor> = grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let mut trace = trace;
        if l2 > 0.0 {
            let penalty: f64 = self.params.iter().map(Tensor::norm_sq).sum::<f64>() * l2 / 2.0;
            trace.loss = trace.loss.map(|l| l + penalty);
            for (g, p) in param_grads.iter_mut().zip(&self.params) {
                g.axpy(l2, p)?;
            }
        }
        Ok((
            trace,
            BackwardTrace {
                param_grads,
                param_layer: self.param_layer_map(),
            },
        ))
    }

    /// Forward plus a backward pass that stops at layer `min_layer`.
    pub(crate) fn loss_and_grads_from(
        &self,
        x: &Tensor,
        y: usize,
        min_layer: usize,
    ) -> Result<(ForwardTrace, Vec<Option<Tensor>>)> {
        if y >= self.output_dim {
            return Err(MiaError::Range(format!(
                "label {y} out of range for {} classes",
                self.output_dim
            )));
        }
        let cache = self.forward_batch(x.data(), 1, None)?;
        let logits = cache.output();
        let loss = cross_entropy(logits, y);
        let mut dlogits = softmax(logits);
        dlogits[y] -= 1.0;
        let (grads, _) = self.backward_partial(&cache, dlogits, min_layer, false)?;
        Ok((self.trace_from_cache(&cache, Some(loss)), grads))
    }
}

/// Euclidean norm over the selected gradient tensors.
pub fn gradient_norm(grads: &BackwardTrace, selector: LayerSelector) -> Result<f64> {
    let layers = grads.param_layer.iter().copied().max().map_or(0, |m| m + 1);
    let pick = match selector {
        LayerSelector::All => None,
        LayerSelector::Last => {
            if layers == 0 {
                return Err(MiaError::Range("no gradient tensors".into()));
            }
            Some(layers - 1)
        }
        LayerSelector::Index(i) if i < layers => Some(i),
        LayerSelector::Index(i) => {
            return Err(MiaError::Range(format!(
                "layer index {i} out of range for {layers} parametric layers"
            )))
        }
    };
    let sq: f64 = grads
        .param_grads
        .iter()
        .zip(&grads.param_layer)
        .filter(|(_, &l)| pick.is_none_or(|p| p == l))
        .map(|(g, _)| g.norm_sq())
        .sum();
    Ok(sq.sqrt())
}

fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

/// Unfolds a conv input into `[batch * rows * positions, kernel_width]`.
fn im2col(layer: &LayerSpec, input: &[f64], batch: usize) -> Vec<f64> {
    let LayerSpec::Conv1dRows {
        rows,
        width,
        kernel_width,
        stride,
        ..
    } = *layer
    else {
        unreachable!("im2col on a non-conv layer")
    };
    let positions = layer.positions();
    if positions == 1 && kernel_width == width {
        return input.to_vec();
    }
    let mut out = Vec::with_capacity(batch * rows * positions * kernel_width);
    for row in input.chunks_exact(width).take(batch * rows) {
        for p in 0..positions {
            out.extend_from_slice(&row[p * stride..p * stride + kernel_width]);
        }
    }
    out
}

fn col2im(layer: &LayerSpec, dpatch: &[f64], batch: usize) -> Vec<f64> {
    let LayerSpec::Conv1dRows {
        rows,
        width,
        kernel_width,
        stride,
        ..
    } = *layer
    else {
        unreachable!("col2im on a non-conv layer")
    };
    let positions = layer.positions();
    if positions == 1 && kernel_width == width {
        return dpatch.to_vec();
    }
    let mut dx = vec![0.0; batch * rows * width];
    for (r, row) in dx.chunks_exact_mut(width).enumerate() {
        for p in 0..positions {
            let src = &dpatch[(r * positions + p) * kernel_width..][..kernel_width];
            row[p * stride..p * stride + kernel_width]
                .iter_mut()
                .zip(src)
                .for_each(|(a, b)| *a += b);
        }
    }
    dx
}

/// `c = op(a) * op(b) + beta * c` for row-major operands, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored with its
/// dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above guarantees every strided access stays inside
    // the slices; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
