//! Binary classifier separating normal latents (label 0) from pseudo-anomaly
//! latents (label 1). Its sigmoid output is the anomaly score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KvMap};
use crate::nn::{Activation, AdamState, GradTape, Mlp, NnError, Tensor};
use crate::par::{map_indexed, Exec};
use crate::train::{holdout_split, EarlyStopping, Schedule, TrainHistory, SCHEDULE_KEYS};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("the {0} class is empty")]
    EmptyClass(&'static str),
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Fit a per-coordinate shift and scale on the normal latents before training.
    pub standardize: bool,
    pub schedule: Schedule,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_dim: 70,
            hidden: vec![64, 32],
            standardize: true,
            schedule: Schedule::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(1);
        w
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("input_dim", self.input_dim);
        kv.set_list("hidden", &self.hidden);
        kv.set("standardize", self.standardize);
        self.schedule.write_kv(&mut kv);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        let mut known = vec!["input_dim", "hidden", "standardize"];
        known.extend_from_slice(SCHEDULE_KEYS);
        kv.ensure_known(&known)?;
        let mut c = ClassifierConfig::default();
        kv.read("input_dim", &mut c.input_dim)?;
        kv.read_list("hidden", &mut c.hidden)?;
        kv.read("standardize", &mut c.standardize)?;
        c.schedule.read_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(ConfigError::Invalid("classifier widths must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prediction {
    Normal,
    Anomaly,
}

/// Frozen affine map `(z - shift) * scale` applied ahead of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct InputScaling {
    pub shift: Tensor,
    pub scale: Tensor,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling {
            shift: Tensor::zeros(&[dim]),
            scale: Tensor::filled(&[dim], 1.0),
        }
    }

    /// Mean and inverse standard deviation of each column; constant columns keep scale 1.
    pub fn fit(z: &Tensor) -> Self {
        let (n, d) = (z.rows() as f64, z.cols());
        let mut mean = vec![0.0; d];
        for r in z.row_vectors() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in z.row_vectors() {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2));
        }
        let scale = var.iter().map(|&v| if v / n > 1e-24 { (n / v).sqrt() } else { 1.0 }).collect();
        InputScaling {
            shift: Tensor::new(vec![d], mean).expect("length d"),
            scale: Tensor::new(vec![d], scale).expect("length d"),
        }
    }

    pub fn apply(&self, z: &Tensor) -> Tensor {
        let (shift, scale) = (self.shift.data(), self.scale.data());
        let d = shift.len();
        let data = z.data().iter().enumerate().map(|(k, v)| (v - shift[k % d]) * scale[k % d]).collect();
        Tensor::new(z.shape().to_vec(), data).expect("same shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub input: InputScaling,
    pub net: Mlp,
}

const SCORE_CHUNK: usize = 256;

impl ClassifierModel {
    pub fn new(config: &ClassifierConfig, seed: u64) -> Result<Self, ClassifierError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::init(config, &mut rng))
    }

    fn init(config: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        ClassifierModel {
            input: InputScaling::identity(config.input_dim),
            net: Mlp::new(&config.widths(), Activation::Relu, Activation::Sigmoid, rng),
        }
    }

    /// All weights and biases zero, identity input scaling: scores 0.5 everywhere.
    pub fn zeroed(config: &ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::init(config, &mut rng);
        m.net.params_mut().into_iter().for_each(|p| p.data_mut().fill(0.0));
        m
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn score(&self, z: &[f64]) -> Result<f64, NnError> {
        if z.len() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.input_dim()],
                found: vec![z.len()],
            });
        }
        let x = Tensor::new(vec![1, z.len()], z.to_vec())?;
        Ok(self.net.forward(&self.input.apply(&x))?.data()[0])
    }

    /// Scores every row of `z`; fixed 256-row chunks, order preserved.
    pub fn score_batch(&self, z: &Tensor, exec: Exec) -> Result<Vec<f64>, NnError> {
        if z.cols() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.input_dim()],
                found: vec![z.cols()],
            });
        }
        let n = z.rows();
        let parts = map_indexed(exec, n.div_ceil(SCORE_CHUNK), |k| {
            let idx: Vec<usize> = (k * SCORE_CHUNK..((k + 1) * SCORE_CHUNK).min(n)).collect();
            self.net.forward(&self.input.apply(&z.select_rows(&idx))).map(Tensor::into_data)
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn predict(&self, z: &[f64], threshold: f64) -> Result<Prediction, ClassifierError> {
        check_threshold(threshold)?;
        Ok(decide(self.score(z)?, threshold))
    }

    /// Mean binary cross-entropy of `z` against 0/1 targets, computed from
    /// logits so saturated outputs keep a usable gradient.
    pub fn loss(&self, z: &Tensor, targets: &Tensor) -> Result<f64, NnError> {
        crate::nn::bce_with_logits(&self.net.forward_logits(&self.input.apply(z))?, targets)
    }

    pub fn gradients(&self, z: &Tensor, targets: &Tensor) -> Result<(f64, Vec<Tensor>), NnError> {
        let z = self.input.apply(z);
        let mut tape = GradTape::new();
        let bound = self.net.bind(&mut tape, true);
        let x = tape.constant_ref(&z);
        let t = tape.constant_ref(targets);
        let logits = bound.forward_logits(&mut tape, x)?;
        let loss = tape.bce_with_logits(logits, t)?;
        let value = tape.scalar(loss)?;
        let g = tape.backward(loss)?;
        Ok((value, bound.grads(&g)))
    }

    /// Trained weights and biases; the input scaling is not counted.
    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

fn check_threshold(threshold: f64) -> Result<(), ClassifierError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(ClassifierError::BadThreshold(threshold))
    }
}

/// `Anomaly` iff `score >= threshold`.
pub fn decide(score: f64, threshold: f64) -> Prediction {
    if score >= threshold {
        Prediction::Anomaly
    } else {
        Prediction::Normal
    }
}

pub fn predict_batch(scores: &[f64], threshold: f64) -> Result<Vec<Prediction>, ClassifierError> {
    check_threshold(threshold)?;
    Ok(scores.iter().map(|&s| decide(s, threshold)).collect())
}

/// Stacks normals (target 0) over pseudo-anomalies (target 1).
pub fn labeled_matrix(normals: &Tensor, pseudo: &Tensor) -> Result<(Tensor, Tensor), NnError> {
    if normals.cols() != pseudo.cols() {
        return Err(NnError::ShapeMismatch {
            expected: vec![normals.cols()],
            found: vec![pseudo.cols()],
        });
    }
    let mut data = normals.data().to_vec();
    data.extend_from_slice(pseudo.data());
    let n = normals.rows() + pseudo.rows();
    let mut targets = vec![0.0; normals.rows()];
    targets.resize(n, 1.0);
    Ok((
        Tensor::new(vec![n, normals.cols()], data)?,
        Tensor::new(vec![n, 1], targets)?,
    ))
}

/// BCE training on shuffled mixed batches with early stopping on held-out loss.
/// Empty classes are passed as `None`. With `standardize`, the input scaling
/// is fitted on every normal latent, held-out ones included.
pub fn train_classifier(
    normals: Option<&Tensor>,
    pseudo: Option<&Tensor>,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(ClassifierModel, TrainHistory), ClassifierError> {
    config.validate()?;
    let normals = normals.ok_or(ClassifierError::EmptyClass("normal"))?;
    let pseudo = pseudo.ok_or(ClassifierError::EmptyClass("pseudo-anomaly"))?;
    if normals.cols() != config.input_dim {
        return Err(NnError::ShapeMismatch {
            expected: vec![config.input_dim],
            found: vec![normals.cols()],
        }
        .into());
    }
    let (x, y) = labeled_matrix(normals, pseudo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ClassifierModel::init(config, &mut rng);
    if config.standardize {
        model.input = InputScaling::fit(normals);
    }
    let sched = &config.schedule;
    let (mut train_idx, val_idx) = holdout_split(x.rows(), sched.val_fraction, &mut rng);
    let (vx, vy) = (x.select_rows(&val_idx), y.select_rows(&val_idx));
    let mut opt = AdamState::new(sched.adam, &model.net.param_shapes())?;

    let initial = model.loss(&vx, &vy)?;
    let mut stopper = EarlyStopping::new(sched.patience, initial);
    let mut best = model.clone();
    let mut val_losses = Vec::new();
    for epoch in 1..=sched.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(sched.batch_size) {
            let (_, g) = model.gradients(&x.select_rows(batch), &y.select_rows(batch))?;
            opt.step(&mut model.net.params_mut(), &g)?;
        }
        let v = model.loss(&vx, &vy)?;
        val_losses.push(v);
        if stopper.observe(epoch, v) {
            best = model.clone();
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
