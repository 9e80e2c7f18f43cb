use serde::{Deserialize, Serialize};

use super::network::{BackwardTrace, Network};
use crate::error::{MiaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters, without any per-run state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(0.001)
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..OptimizerConfig::adam(learning_rate)
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            l2_weight: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MiaError::arg("learning rate must be finite and non-negative"));
        }
        if self.l2_weight < 0.0 {
            return Err(MiaError::arg("l2 weight must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(MiaError::arg("adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            config: self.clone(),
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        }
    }
}

/// SGD or Adam (with bias correction). L2 decay is coupled: the update uses
/// `g + l2 * w`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn step(&mut self, net: &mut Network, grads: &BackwardTrace) -> Result<()> {
        self.step_params(net.params_mut(), &grads.param_grads)
    }

    pub(crate) fn step_params(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(MiaError::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(MiaError::dim(format!(
                    "gradient {i} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let cfg = &self.config;
        let (lr, l2) = (cfg.learning_rate, cfg.l2_weight);
        self.step_count += 1;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * (gv + l2 * *w);
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.v = self.m.clone();
                }
                let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
                let t = self.step_count as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    if m.shape() != p.shape() {
                        return Err(MiaError::dim("adam moments do not match parameters"));
                    }
                    let iter = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                    for ((w, &gv), (mv, vv)) in iter {
                        let gv = gv + l2 * *w;
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
