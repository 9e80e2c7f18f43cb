//! White-box membership inference laboratory.
//!
//! Trains small dense classifiers (stand-alone, fine-tuned, or with
//! federated averaging), extracts per-example white-box observations
//! (gradients, activations, outputs, losses) and trains attack networks
//! that decide membership from them, supervised or by clustering an
//! unsupervised embedding.

pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod features;
pub mod fed;
pub mod metrics;
pub mod nn;
pub mod presets;
pub mod rng;
pub mod snapshot;
pub mod target;
pub mod tensor;

pub use error::{MiaError, Result};
pub use tensor::Tensor;
