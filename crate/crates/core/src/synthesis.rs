//! Pseudo-anomaly synthesis: perturb normalized latents with Gaussian noise
//! and map them back through the generation direction of a frozen flow.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::flow::{FlowError, FlowModel};
use crate::nn::Tensor;
use crate::par::{map_indexed, Exec};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("sigma must be non-negative and finite, got {0}")]
    NegativeSigma(f64),
    #[error("no normal latents to perturb")]
    EmptyInput,
    #[error("ratio {0} is outside (0, 1]; enable oversampling for larger ratios")]
    BadRatio(f64),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// `η = μ + σ·ε`, with scalar `μ` and `σ` broadcast over every dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(mu: f64, sigma: f64, seed: u64) -> Result<Self, SynthesisError> {
        let spec = NoiseSpec { mu, sigma, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !self.mu.is_finite() {
            return Err(SynthesisError::NegativeSigma(self.sigma));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisConfig {
    /// Pseudo-anomalies per normal sample.
    pub ratio: f64,
    /// Permits `ratio > 1` (ablation runs).
    pub oversample: bool,
    /// Adds the noise directly to `z` without the flow (ablation runs).
    pub bypass_flow: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            ratio: 0.5,
            oversample: false,
            bypass_flow: false,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let ok = self.ratio > 0.0 && self.ratio.is_finite() && (self.ratio <= 1.0 || self.oversample);
        if ok {
            Ok(())
        } else {
            Err(SynthesisError::BadRatio(self.ratio))
        }
    }

    pub fn count(&self, n_normal: usize) -> usize {
        (self.ratio * n_normal as f64).floor() as usize
    }
}

/// Row `i` is drawn from its own ChaCha8 stream, so the result for a given
/// row depends only on `(seed, i)`.
pub fn sample_noise(spec: &NoiseSpec, n: usize, dim: usize, exec: Exec) -> Result<Vec<Vec<f64>>, SynthesisError> {
    spec.validate()?;
    Ok(map_indexed(exec, n, |i| noise_row(spec, i, dim)))
}

fn noise_row(spec: &NoiseSpec, i: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    (0..dim)
        .map(|_| {
            let eps: f64 = rng.sample(StandardNormal);
            spec.mu + spec.sigma * eps
        })
        .collect()
}

/// Indices of the normals to perturb: full passes over `0..n` while more than
/// `n` are requested, then a draw without replacement for the remainder.
pub fn select_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut out = Vec::with_capacity(m);
    while m - out.len() >= n && n > 0 {
        out.extend(0..n);
    }
    let rest = m - out.len();
    if rest > 0 {
        out.extend(index::sample(&mut rng, n, rest));
    }
    out
}

const CHUNK_ROWS: usize = 256;

/// Returns `floor(ratio · n)` pseudo-anomaly latents as a `[m, dim]` tensor,
/// or `None` when that count is zero.
pub fn synthesize(
    flow: &FlowModel,
    normals: &Tensor,
    spec: &NoiseSpec,
    cfg: &SynthesisConfig,
    exec: Exec,
) -> Result<Option<Tensor>, SynthesisError> {
    spec.validate()?;
    cfg.validate()?;
    if normals.is_empty() {
        return Err(SynthesisError::EmptyInput);
    }
    let n = normals.rows();
    let dim = normals.cols();
    let m = cfg.count(n);
    if m == 0 {
        return Ok(None);
    }
    let picked = select_indices(n, m, spec.seed);
    let chunks = m.div_ceil(CHUNK_ROWS);
    let parts = map_indexed(exec, chunks, |k| -> Result<Vec<f64>, SynthesisError> {
        let lo = k * CHUNK_ROWS;
        let hi = (lo + CHUNK_ROWS).min(m);
        let z = normals.select_rows(&picked[lo..hi]);
        let base = if cfg.bypass_flow { z } else { flow.normalize_batch(&z)?.0 };
        let mut shifted = base.into_data();
        for (r, row) in shifted.chunks_mut(dim).enumerate() {
            for (v, e) in row.iter_mut().zip(noise_row(spec, lo + r, dim)) {
                *v += e;
            }
        }
        let shifted = Tensor::new(vec![hi - lo, dim], shifted).map_err(FlowError::from)?;
        if cfg.bypass_flow {
            Ok(shifted.into_data())
        } else {
            Ok(flow.generate_batch(&shifted)?.into_data())
        }
    });
    let mut data = Vec::with_capacity(m * dim);
    for p in parts {
        data.extend(p?);
    }
    Ok(Some(Tensor::new(vec![m, dim], data).map_err(FlowError::from)?))
}
