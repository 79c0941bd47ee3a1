//! Bidirectional normalizing flow built from affine coupling blocks.
//!
//! `normalize` maps a latent vector toward the standard normal base space and
//! returns the log-determinant of its Jacobian; `generate` is the exact
//! inverse. Each block keeps the masked coordinates fixed and transforms the
//! rest as `b' = b · exp(s(a)) + t(a)` with `s = clamp · tanh(raw)`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KvMap};
use crate::nn::{Activation, AdamState, BoundMlp, GradTape, Mlp, NnError, NodeId, Tensor};
use crate::train::{holdout_split, EarlyStopping, Schedule, TrainHistory, SCHEDULE_KEYS};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("non-finite value after coupling block {0}")]
    NonFiniteIntermediate(usize),
    #[error("no latent vectors to train on")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub blocks: usize,
    /// Hidden widths of every scale and translation subnet.
    pub hidden: Vec<usize>,
    pub clamp: f64,
    /// Decay of the exponential moving average of parameters that early
    /// stopping evaluates and training returns; 0 keeps the raw iterate.
    pub ema_decay: f64,
    pub schedule: Schedule,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dim: 70,
            blocks: 8,
            hidden: vec![128, 128],
            clamp: 2.0,
            ema_decay: 0.99,
            schedule: Schedule {
                batch_size: 128,
                ..Schedule::default()
            },
        }
    }
}

impl FlowConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("dim", self.dim);
        kv.set("blocks", self.blocks);
        kv.set_list("hidden", &self.hidden);
        kv.set("clamp", self.clamp);
        kv.set("ema_decay", self.ema_decay);
        self.schedule.write_kv(&mut kv);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        let mut known = vec!["dim", "blocks", "hidden", "clamp", "ema_decay"];
        known.extend_from_slice(SCHEDULE_KEYS);
        kv.ensure_known(&known)?;
        let mut c = FlowConfig::default();
        kv.read("dim", &mut c.dim)?;
        kv.read("blocks", &mut c.blocks)?;
        kv.read_list("hidden", &mut c.hidden)?;
        kv.read("clamp", &mut c.clamp)?;
        kv.read("ema_decay", &mut c.ema_decay)?;
        c.schedule.read_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dim < 2 {
            return Err(ConfigError::Invalid("flow dimension must be at least 2".into()));
        }
        if self.blocks == 0 || self.hidden.contains(&0) {
            return Err(ConfigError::Invalid("flow needs at least one block and positive widths".into()));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(ConfigError::Invalid("clamp must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(ConfigError::Invalid("ema_decay must be in [0, 1)".into()));
        }
        self.schedule.validate()
    }
}

/// One affine coupling block.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    /// `true` marks pass-through coordinates.
    mask: Vec<bool>,
    pass: Vec<usize>,
    trans: Vec<usize>,
    pub s_net: Mlp,
    pub t_net: Mlp,
    pub clamp: f64,
}

/// Alternating parity mask: even blocks pass even coordinates through.
pub fn parity_mask(dim: usize, block: usize) -> Vec<bool> {
    (0..dim).map(|i| i % 2 == block % 2).collect()
}

impl CouplingBlock {
    /// Random hidden layers; zeroed output layers so the block starts as the identity.
    pub fn new<R: Rng + ?Sized>(mask: Vec<bool>, hidden: &[usize], clamp: f64, rng: &mut R) -> Self {
        let pass: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let trans: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        let mut widths = vec![pass.len()];
        widths.extend(hidden);
        widths.push(trans.len());
        let mut s_net = Mlp::new(&widths, Activation::Relu, Activation::Linear, rng);
        let mut t_net = Mlp::new(&widths, Activation::Relu, Activation::Linear, rng);
        s_net.zero_output_layer();
        t_net.zero_output_layer();
        CouplingBlock {
            mask,
            pass,
            trans,
            s_net,
            t_net,
            clamp,
        }
    }

    pub fn from_parts(mask: Vec<bool>, s_net: Mlp, t_net: Mlp, clamp: f64) -> Result<Self, NnError> {
        let pass: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let trans: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        for net in [&s_net, &t_net] {
            if net.in_dim() != pass.len() || net.out_dim() != trans.len() {
                return Err(NnError::ShapeMismatch {
                    expected: vec![pass.len(), trans.len()],
                    found: vec![net.in_dim(), net.out_dim()],
                });
            }
        }
        Ok(CouplingBlock {
            mask,
            pass,
            trans,
            s_net,
            t_net,
            clamp,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn pass_through(&self) -> &[usize] {
        &self.pass
    }

    pub fn transformed(&self) -> &[usize] {
        &self.trans
    }

    /// Scale exponents and shifts for the pass-through half of `h`.
    fn scale_shift(&self, h: &Tensor) -> Result<(Tensor, Tensor), NnError> {
        let n = h.rows();
        let mut a = Vec::with_capacity(n * self.pass.len());
        for r in h.row_vectors() {
            a.extend(self.pass.iter().map(|&c| r[c]));
        }
        let a = Tensor::from_parts(vec![n, self.pass.len()], a);
        let mut s = self.s_net.forward(&a)?;
        let clamp = self.clamp;
        s.data_mut().iter_mut().for_each(|v| *v = clamp * v.tanh());
        let t = self.t_net.forward(&a)?;
        Ok((s, t))
    }

    /// Forward (normalizing) pass; adds each row's log-determinant to `log_det`.
    pub fn forward(&self, h: &Tensor, log_det: &mut [f64]) -> Result<Tensor, NnError> {
        let (s, t) = self.scale_shift(h)?;
        let mut out = h.clone();
        let d = h.cols();
        let k = self.trans.len();
        for (i, ld) in log_det.iter_mut().enumerate() {
            let row = &mut out.data_mut()[i * d..(i + 1) * d];
            for (j, &c) in self.trans.iter().enumerate() {
                let sv = s.data()[i * k + j];
                row[c] = row[c] * sv.exp() + t.data()[i * k + j];
                *ld += sv;
            }
        }
        Ok(out)
    }

    /// Inverse (generating) pass; adds the inverse log-determinant to `log_det`.
    pub fn inverse(&self, h: &Tensor, log_det: &mut [f64]) -> Result<Tensor, NnError> {
        let (s, t) = self.scale_shift(h)?;
        let mut out = h.clone();
        let d = h.cols();
        let k = self.trans.len();
        for (i, ld) in log_det.iter_mut().enumerate() {
            let row = &mut out.data_mut()[i * d..(i + 1) * d];
            for (j, &c) in self.trans.iter().enumerate() {
                let sv = s.data()[i * k + j];
                row[c] = (row[c] - t.data()[i * k + j]) * (-sv).exp();
                *ld -= sv;
            }
        }
        Ok(out)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.s_net.params_mut();
        p.extend(self.t_net.params_mut());
        p
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut s = self.s_net.param_shapes();
        s.extend(self.t_net.param_shapes());
        s
    }
}

/// Ordered coupling blocks over a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    pub blocks: Vec<CouplingBlock>,
}

/// `-(d/2) ln(2π) - ||c||² / 2`.
pub fn standard_normal_log_density(c: &[f64]) -> f64 {
    let sq: f64 = c.iter().map(|v| v * v).sum();
    -(c.len() as f64) / 2.0 * (2.0 * PI).ln() - sq / 2.0
}

struct BoundBlock<'b> {
    block: &'b CouplingBlock,
    s: BoundMlp,
    t: BoundMlp,
}

impl FlowModel {
    pub fn new(config: &FlowConfig, seed: u64) -> Result<Self, FlowError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::init(config, &mut rng))
    }

    fn init<R: Rng + ?Sized>(config: &FlowConfig, rng: &mut R) -> Self {
        let blocks = (0..config.blocks)
            .map(|k| CouplingBlock::new(parity_mask(config.dim, k), &config.hidden, config.clamp, rng))
            .collect();
        FlowModel {
            dim: config.dim,
            blocks,
        }
    }

    pub fn from_blocks(dim: usize, blocks: Vec<CouplingBlock>) -> Result<Self, NnError> {
        if let Some(b) = blocks.iter().find(|b| b.mask.len() != dim) {
            return Err(NnError::ShapeMismatch {
                expected: vec![dim],
                found: vec![b.mask.len()],
            });
        }
        Ok(FlowModel { dim, blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_input(&self, x: &Tensor) -> Result<(), FlowError> {
        if x.cols() != self.dim {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.dim],
                found: vec![x.cols()],
            }
            .into());
        }
        if !x.is_finite() {
            return Err(FlowError::NonFiniteInput);
        }
        Ok(())
    }

    /// Maps a `[n, dim]` batch to the base space; returns per-row log-determinants.
    pub fn normalize_batch(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>), FlowError> {
        self.check_input(z)?;
        let mut log_det = vec![0.0; z.rows()];
        let mut h = z.clone();
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, &mut log_det)?;
            if !h.is_finite() || log_det.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFiniteIntermediate(k));
            }
        }
        Ok((h, log_det))
    }

    /// Inverse of [`normalize_batch`](Self::normalize_batch), with the inverse log-determinants.
    pub fn generate_batch_with_log_det(&self, c: &Tensor) -> Result<(Tensor, Vec<f64>), FlowError> {
        self.check_input(c)?;
        let mut log_det = vec![0.0; c.rows()];
        let mut h = c.clone();
        for (k, block) in self.blocks.iter().enumerate().rev() {
            h = block.inverse(&h, &mut log_det)?;
            if !h.is_finite() {
                return Err(FlowError::NonFiniteIntermediate(k));
            }
        }
        Ok((h, log_det))
    }

    pub fn generate_batch(&self, c: &Tensor) -> Result<Tensor, FlowError> {
        Ok(self.generate_batch_with_log_det(c)?.0)
    }

    pub fn normalize(&self, z: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let t = Tensor::from_parts(vec![1, z.len()], z.to_vec());
        let (c, ld) = self.normalize_batch(&t)?;
        Ok((c.into_data(), ld[0]))
    }

    pub fn generate(&self, c: &[f64]) -> Result<Vec<f64>, FlowError> {
        let t = Tensor::from_parts(vec![1, c.len()], c.to_vec());
        Ok(self.generate_batch(&t)?.into_data())
    }

    pub fn log_likelihood(&self, z: &[f64]) -> Result<f64, FlowError> {
        let (c, ld) = self.normalize(z)?;
        Ok(standard_normal_log_density(&c) + ld)
    }

    pub fn log_likelihood_batch(&self, z: &Tensor) -> Result<Vec<f64>, FlowError> {
        let (c, ld) = self.normalize_batch(z)?;
        Ok(c.row_vectors()
            .zip(ld)
            .map(|(r, l)| standard_normal_log_density(r) + l)
            .collect())
    }

    /// Mean negative log-likelihood of a batch.
    pub fn nll(&self, z: &Tensor) -> Result<f64, FlowError> {
        let ll = self.log_likelihood_batch(z)?;
        Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
    }

    /// Mean NLL and its gradient for every subnet parameter, in [`params_mut`](Self::params_mut) order.
    pub fn nll_gradients(&self, z: &Tensor) -> Result<(f64, Vec<Tensor>), FlowError> {
        self.check_input(z)?;
        let mut tape = GradTape::new();
        let bound: Vec<BoundBlock> = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                block: b,
                s: b.s_net.bind(&mut tape, true),
                t: b.t_net.bind(&mut tape, true),
            })
            .collect();
        let x = tape.constant_ref(z);
        let loss = nll_on_tape(&mut tape, &bound, x, self.dim)?;
        let value = tape.scalar(loss)?;
        let g = tape.backward(loss)?;
        let grads = bound
            .iter()
            .flat_map(|b| {
                let mut v = b.s.grads(&g);
                v.extend(b.t.grads(&g));
                v
            })
            .collect();
        Ok((value, grads))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().flat_map(|b| b.param_shapes()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.s_net.param_count() + b.t_net.param_count())
            .sum()
    }
}

fn nll_on_tape(tape: &mut GradTape<'_>, blocks: &[BoundBlock], z: NodeId, dim: usize) -> Result<NodeId, NnError> {
    let mut h = z;
    let mut log_det: Option<NodeId> = None;
    for b in blocks {
        let a = tape.gather_cols(h, &b.block.pass)?;
        let x_t = tape.gather_cols(h, &b.block.trans)?;
        let raw = b.s.forward(tape, a)?;
        let th = tape.tanh(raw)?;
        let s = tape.scale(th, b.block.clamp)?;
        let t = b.t.forward(tape, a)?;
        let e = tape.exp(s)?;
        let scaled = tape.mul(x_t, e)?;
        let shifted = tape.add(scaled, t)?;
        h = tape.scatter_cols(a, &b.block.pass, shifted, &b.block.trans)?;
        let ld = tape.row_sum(s)?;
        log_det = Some(match log_det {
            Some(prev) => tape.add(prev, ld)?,
            None => ld,
        });
    }
    let sq = tape.mul(h, h)?;
    let sq = tape.row_sum(sq)?;
    let half = tape.scale(sq, 0.5)?;
    let per_row = match log_det {
        Some(ld) => tape.sub(half, ld)?,
        None => half,
    };
    let mean = tape.mean(per_row)?;
    tape.offset(mean, dim as f64 / 2.0 * (2.0 * PI).ln())
}

/// Mean NLL over `z`, evaluated in chunks.
fn nll_chunked(model: &FlowModel, z: &Tensor, chunk: usize) -> Result<f64, FlowError> {
    let n = z.rows();
    let mut total = 0.0;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        total += model.nll(&z.select_rows(&idx))? * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// `avg ← decay · avg + (1 − decay) · model`, parameter by parameter.
fn blend_into(avg: &mut FlowModel, model: &mut FlowModel, decay: f64) {
    for (a, p) in avg.params_mut().into_iter().zip(model.params_mut()) {
        for (x, &y) in a.data_mut().iter_mut().zip(p.data()) {
            *x = decay * *x + (1.0 - decay) * y;
        }
    }
}

/// Maximum-likelihood training in the normalizing direction with early stopping on held-out NLL.
///
/// With a nonzero `ema_decay` the held-out NLL, and the returned model, come
/// from the parameter average rather than the last Adam iterate. The NLL is
/// nearly flat in per-coordinate shifts of the base space, so the raw iterate
/// carries offsets of several tenths that the average removes.
pub fn train_flow(latents: &Tensor, config: &FlowConfig, seed: u64) -> Result<(FlowModel, TrainHistory), FlowError> {
    config.validate()?;
    if latents.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::init(config, &mut rng);
    model.check_input(latents)?;
    let sched = &config.schedule;
    let (mut train_idx, val_idx) = holdout_split(latents.rows(), sched.val_fraction, &mut rng);
    let val = latents.select_rows(&val_idx);
    let mut opt = AdamState::new(sched.adam, &model.param_shapes())?;

    let initial = nll_chunked(&model, &val, 1024)?;
    let mut stopper = EarlyStopping::new(sched.patience, initial);
    let mut best = model.clone();
    let mut avg = model.clone();
    let mut val_losses = Vec::new();
    for epoch in 1..=sched.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(sched.batch_size) {
            let (_, g) = model.nll_gradients(&latents.select_rows(batch))?;
            opt.step(&mut model.params_mut(), &g)?;
            blend_into(&mut avg, &mut model, config.ema_decay);
        }
        let v = nll_chunked(&avg, &val, 1024)?;
        val_losses.push(v);
        if stopper.observe(epoch, v) {
            best = avg.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok((
        best,
        TrainHistory {
            initial_val: initial,
            val_losses,
            best_epoch: stopper.best_epoch(),
            best_val: stopper.best(),
        },
    ))
}
