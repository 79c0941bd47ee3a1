//! Dense-network substrate: tensors, layers, reverse-mode gradients and Adam.

mod adam;
pub(crate) mod gemm;
pub mod gradcheck;
mod layer;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gemm::matmul;
pub use layer::{Activation, BoundMlp, DenseLayer, Mlp, LEAKY_SLOPE};
pub use tape::{GradTape, Gradients, NodeId, BCE_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error("loss is not recorded on this tape")]
    DetachedLoss,
    #[error("node is not recorded on this tape")]
    DetachedNode,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid optimizer hyperparameters: {0}")]
    BadHyperparameter(String),
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, NnError> {
    a.same_shape(b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// Mean binary cross-entropy; predictions are clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64, NnError> {
    pred.same_shape(target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// Mean binary cross-entropy of `sigmoid(logits)`, evaluated stably as
/// `max(z, 0) - z·t + ln(1 + e^{-|z|})`; no clamping needed.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<f64, NnError> {
    logits.same_shape(target)?;
    let s: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(s / logits.len() as f64)
}
