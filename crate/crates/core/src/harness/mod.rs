//! Orchestration: checkpoints, metrics, the synthetic corpus, and the
//! end-to-end pipeline with two-module inference.

pub mod checkpoint;
pub mod corpus;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod store;

use std::error::Error as StdError;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ConfigError;
use crate::nn::Tensor;

pub use metrics::{auroc, evaluate, EvalReport, ScoredSample};
pub use pipeline::{infer, run_pipeline, InferenceModel, PipelineConfig, PipelineOutcome};

/// Per-stage seed: the first eight bytes of `sha256(seed_le ‖ stage)`.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Hex SHA-256 over a tensor's shape and value bits.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    checkpoint::hex(&h.finalize())
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
    #[error("encoder emits {encoder}-dim latents but the classifier expects {classifier}")]
    CheckpointMismatch { encoder: usize, classifier: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl HarnessError {
    pub fn stage<E: StdError + Send + Sync + 'static>(stage: &'static str) -> impl FnOnce(E) -> HarnessError {
        move |e| HarnessError::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// The stage name for stage-tagged errors.
    pub fn stage_name(&self) -> Option<&'static str> {
        match self {
            HarnessError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// The underlying stage error, when it has type `E`.
    pub fn source_as<E: StdError + 'static>(&self) -> Option<&E> {
        match self {
            HarnessError::Stage { source, .. } => source.downcast_ref(),
            _ => None,
        }
    }
}
