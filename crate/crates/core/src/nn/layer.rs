use serde::{Deserialize, Serialize};

use crate::error::{MiaError, Result};

/// One stage of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `y = x W + b` with `W` stored as `[in_dim, out_dim]`.
    Dense { in_dim: usize, out_dim: usize },
    Relu,
    /// Inverted dropout; identity outside training.
    Dropout { keep_prob: f64 },
    /// Slides a `1 x kernel_width` kernel along each row of a `rows x width`
    /// input independently (no padding). Output layout per example is
    /// `[rows][positions][kernels]`.
    Conv1dRows {
        rows: usize,
        width: usize,
        kernels: usize,
        kernel_width: usize,
        stride: usize,
    },
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense { in_dim, out_dim }
    }

    pub fn dropout(keep_prob: f64) -> Self {
        LayerSpec::Dropout { keep_prob }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(MiaError::arg(format!(
                        "dense layer needs positive dims, got {in_dim}x{out_dim}"
                    )));
                }
            }
            LayerSpec::Relu => {}
            LayerSpec::Dropout { keep_prob } => {
                if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                    return Err(MiaError::arg(format!(
                        "dropout keep_prob must lie in (0, 1], got {keep_prob}"
                    )));
                }
            }
            LayerSpec::Conv1dRows {
                rows,
                width,
                kernels,
                kernel_width,
                stride,
            } => {
                if rows == 0 || width == 0 || kernels == 0 || kernel_width == 0 || stride == 0 {
                    return Err(MiaError::arg("conv1d-rows fields must be positive"));
                }
                if kernel_width > width {
                    return Err(MiaError::arg(format!(
                        "kernel width {kernel_width} exceeds row width {width}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv1dRows { .. })
    }

    /// Fixed input width, for layers that have one.
    pub fn in_dim(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { in_dim, .. } => Some(in_dim),
            LayerSpec::Conv1dRows { rows, width, .. } => Some(rows * width),
            _ => None,
        }
    }

    pub fn out_dim(&self, input: usize) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            LayerSpec::Relu | LayerSpec::Dropout { .. } => input,
            LayerSpec::Conv1dRows { rows, kernels, .. } => rows * self.positions() * kernels,
        }
    }

    /// Kernel placements per row (conv only, 0 otherwise).
    pub fn positions(&self) -> usize {
        match *self {
            LayerSpec::Conv1dRows {
                width,
                kernel_width,
                stride,
                ..
            } => (width - kernel_width) / stride + 1,
            _ => 0,
        }
    }

    /// Weight shape followed by bias shape.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => vec![vec![in_dim, out_dim], vec![out_dim]],
            LayerSpec::Conv1dRows {
                kernels,
                kernel_width,
                ..
            } => vec![vec![kernel_width, kernels], vec![kernels]],
            _ => Vec::new(),
        }
    }
}
