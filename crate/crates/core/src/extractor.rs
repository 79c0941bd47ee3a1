//! Adversarially trained reconstruction model.
//!
//! The generator is an encoder/decoder pair; the discriminator scores inputs
//! and exposes its last hidden layer as a feature tap for the adversarial
//! (feature-matching) term of the generator objective. Only the encoder is
//! kept for inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KvMap};
use crate::nn::{self, Activation, AdamState, GradTape, Mlp, NnError, Tensor};
use crate::packet::{EncodedPacket, Label, CANONICAL_LEN};
use crate::train::{holdout_split, EarlyStopping, Schedule, TrainHistory, SCHEDULE_KEYS};

pub const DEFAULT_LATENT_DIM: usize = 70;

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("row {0} is labeled as an anomaly; training uses normal traffic only")]
    AnomalyInTrainingSet(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub encoder_hidden: Vec<usize>,
    /// Discriminator hidden widths; the last one is the feature tap.
    pub disc_hidden: Vec<usize>,
    pub w_adv: f64,
    pub w_rec: f64,
    pub schedule: Schedule,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            input_dim: CANONICAL_LEN,
            latent_dim: DEFAULT_LATENT_DIM,
            encoder_hidden: vec![512, 128],
            disc_hidden: vec![256, 64],
            w_adv: 1.0,
            w_rec: 50.0,
            schedule: Schedule::default(),
        }
    }
}

impl ExtractorConfig {
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.encoder_hidden);
        w.push(self.latent_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = self.encoder_widths();
        w.reverse();
        w
    }

    pub fn disc_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.disc_hidden);
        w.push(1);
        w
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("input_dim", self.input_dim);
        kv.set("latent_dim", self.latent_dim);
        kv.set_list("encoder_hidden", &self.encoder_hidden);
        kv.set_list("disc_hidden", &self.disc_hidden);
        kv.set("w_adv", self.w_adv);
        kv.set("w_rec", self.w_rec);
        self.schedule.write_kv(&mut kv);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        let mut known = vec!["input_dim", "latent_dim", "encoder_hidden", "disc_hidden", "w_adv", "w_rec"];
        known.extend_from_slice(SCHEDULE_KEYS);
        kv.ensure_known(&known)?;
        let mut c = ExtractorConfig::default();
        kv.read("input_dim", &mut c.input_dim)?;
        kv.read("latent_dim", &mut c.latent_dim)?;
        kv.read_list("encoder_hidden", &mut c.encoder_hidden)?;
        kv.read_list("disc_hidden", &mut c.disc_hidden)?;
        kv.read("w_adv", &mut c.w_adv)?;
        kv.read("w_rec", &mut c.w_rec)?;
        c.schedule.read_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(ConfigError::Invalid("dimensions must be positive".into()));
        }
        if self.disc_hidden.is_empty() {
            return Err(ConfigError::Invalid("discriminator needs a hidden layer for its feature tap".into()));
        }
        if self.encoder_hidden.iter().chain(&self.disc_hidden).any(|&w| w == 0) {
            return Err(ConfigError::Invalid("layer widths must be positive".into()));
        }
        if !(self.w_adv >= 0.0 && self.w_rec >= 0.0) {
            return Err(ConfigError::Invalid("loss weights must be non-negative".into()));
        }
        self.schedule.validate()
    }
}

/// The inference half of the generator: packet vector to latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    net: Mlp,
}

impl Encoder {
    pub fn new(net: Mlp) -> Self {
        Encoder { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let t = Tensor::new(vec![x.len()], x.to_vec())?;
        Ok(self.net.forward(&t)?.into_data())
    }

    /// Encodes a `[n, input_dim]` batch.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.net.forward(x)
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub encoder: Encoder,
    pub decoder: Mlp,
    pub discriminator: Mlp,
}

/// `w_adv · mse(φ(x), φ(x̂)) + w_rec · mse(x, x̂)`.
pub fn generator_objective(
    x: &Tensor,
    x_hat: &Tensor,
    phi_x: &Tensor,
    phi_x_hat: &Tensor,
    w_adv: f64,
    w_rec: f64,
) -> Result<f64, NnError> {
    Ok(w_adv * nn::mse(phi_x, phi_x_hat)? + w_rec * nn::mse(x, x_hat)?)
}

/// `mean(1 - D(x)) + mean(D(x̂))`.
pub fn discriminator_objective(d_real: &Tensor, d_fake: &Tensor) -> f64 {
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
    1.0 - mean(d_real) + mean(d_fake)
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self, ExtractorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::init(config, &mut rng))
    }

    fn init(config: ExtractorConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Encoder::new(Mlp::new(&config.encoder_widths(), Activation::Relu, Activation::Linear, rng));
        let decoder = Mlp::new(&config.decoder_widths(), Activation::Relu, Activation::Sigmoid, rng);
        let discriminator = Mlp::new(&config.disc_widths(), Activation::LeakyRelu, Activation::Sigmoid, rng);
        FeatureExtractor {
            config,
            encoder,
            decoder,
            discriminator,
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.encoder.encode(x)
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let t = Tensor::new(vec![x.len()], x.to_vec())?;
        Ok(self.reconstruct_batch(&t)?.into_data())
    }

    pub fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.decoder.forward(&self.encoder.encode_batch(x)?)
    }

    /// Discriminator output in (0, 1).
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.discriminator.forward(x)
    }

    /// Output of the discriminator's last hidden layer.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let tap = self.discriminator.layers().len() - 1;
        self.discriminator.forward_prefix(x, tap)
    }

    pub fn generator_loss(&self, x: &Tensor) -> Result<f64, NnError> {
        let x_hat = self.reconstruct_batch(x)?;
        generator_objective(
            x,
            &x_hat,
            &self.features(x)?,
            &self.features(&x_hat)?,
            self.config.w_adv,
            self.config.w_rec,
        )
    }

    pub fn discriminator_loss(&self, x: &Tensor) -> Result<f64, NnError> {
        let x_hat = self.reconstruct_batch(x)?;
        Ok(discriminator_objective(&self.discriminate(x)?, &self.discriminate(&x_hat)?))
    }

    /// Generator parameters: encoder then decoder, in [`Mlp::params`] order.
    pub fn generator_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.net.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    fn generator_shapes(&self) -> Vec<Vec<usize>> {
        let mut s = self.encoder.net.param_shapes();
        s.extend(self.decoder.param_shapes());
        s
    }

    /// Loss and gradients of the generator objective with the discriminator held fixed.
    pub fn generator_gradients(&self, x: &Tensor) -> Result<(f64, Vec<Tensor>), NnError> {
        let phi_x = self.features(x)?;
        let tap = self.discriminator.layers().len() - 1;
        let mut tape = GradTape::new();
        let enc = self.encoder.net.bind(&mut tape, true);
        let dec = self.decoder.bind(&mut tape, true);
        let disc = self.discriminator.bind(&mut tape, false);
        let xn = tape.constant_ref(x);
        let z = enc.forward(&mut tape, xn)?;
        let x_hat = dec.forward(&mut tape, z)?;
        let phi_hat = disc.forward_layers(&mut tape, x_hat, tap)?;
        let phi_x = tape.constant(phi_x);
        let adv = tape.mse(phi_x, phi_hat)?;
        let rec = tape.mse(xn, x_hat)?;
        let adv = tape.scale(adv, self.config.w_adv)?;
        let rec = tape.scale(rec, self.config.w_rec)?;
        let loss = tape.add(adv, rec)?;
        let value = tape.scalar(loss)?;
        let g = tape.backward(loss)?;
        let mut grads = enc.grads(&g);
        grads.extend(dec.grads(&g));
        Ok((value, grads))
    }

    /// Loss and gradients of the discriminator objective with the generator held fixed.
    pub fn discriminator_gradients(&self, x: &Tensor) -> Result<(f64, Vec<Tensor>), NnError> {
        let x_hat = self.reconstruct_batch(x)?;
        let mut tape = GradTape::new();
        let disc = self.discriminator.bind(&mut tape, true);
        let real = tape.constant_ref(x);
        let fake = tape.constant(x_hat);
        let d_real = disc.forward(&mut tape, real)?;
        let d_fake = disc.forward(&mut tape, fake)?;
        let m_real = tape.mean(d_real)?;
        let m_fake = tape.mean(d_fake)?;
        let diff = tape.sub(m_fake, m_real)?;
        let loss = tape.offset(diff, 1.0)?;
        let value = tape.scalar(loss)?;
        let g = tape.backward(loss)?;
        Ok((value, disc.grads(&g)))
    }

    /// Mean generator loss over `x`, evaluated in chunks.
    pub fn generator_loss_chunked(&self, x: &Tensor, chunk: usize) -> Result<f64, NnError> {
        let n = x.rows();
        let mut total = 0.0;
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            total += self.generator_loss(&x.select_rows(&idx))? * idx.len() as f64;
        }
        Ok(total / n as f64)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.discriminator.param_count()
    }
}

/// Stacks packet vectors into a `[n, dim]` matrix, rejecting labeled anomalies.
pub fn normal_matrix(dataset: &[EncodedPacket]) -> Result<Tensor, ExtractorError> {
    if dataset.is_empty() {
        return Err(ExtractorError::EmptyDataset);
    }
    if let Some(i) = dataset.iter().position(|p| p.label == Some(Label::Anomaly)) {
        return Err(ExtractorError::AnomalyInTrainingSet(i));
    }
    let rows: Vec<&[f64]> = dataset.iter().map(|p| p.values.as_slice()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Alternating discriminator/generator updates with two Adam optimizers and
/// early stopping on the held-out generator loss. Returns the best-epoch model.
pub fn train_extractor(
    dataset: &[EncodedPacket],
    config: &ExtractorConfig,
    seed: u64,
) -> Result<(FeatureExtractor, TrainHistory), ExtractorError> {
    let data = normal_matrix(dataset)?;
    train_extractor_on(&data, config, seed, |_, _| {})
}

/// As [`train_extractor`], on a prepared matrix; `progress(epoch, val_loss)` is called per epoch.
pub fn train_extractor_on(
    data: &Tensor,
    config: &ExtractorConfig,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<(FeatureExtractor, TrainHistory), ExtractorError> {
    config.validate()?;
    if data.cols() != config.input_dim {
        return Err(NnError::ShapeMismatch {
            expected: vec![config.input_dim],
            found: vec![data.cols()],
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FeatureExtractor::init(config.clone(), &mut rng);
    let sched = &config.schedule;
    let (mut train_idx, val_idx) = holdout_split(data.rows(), sched.val_fraction, &mut rng);
    let val = data.select_rows(&val_idx);
    let chunk = 256;

    let mut opt_g = AdamState::new(sched.adam, &model.generator_shapes())?;
    let mut opt_d = AdamState::new(sched.adam, &model.discriminator.param_shapes())?;

    let initial = model.generator_loss_chunked(&val, chunk)?;
    let mut stopper = EarlyStopping::new(sched.patience, initial);
    let mut best = model.clone();
    let mut val_losses = Vec::new();

    for epoch in 1..=sched.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(sched.batch_size) {
            let x = data.select_rows(batch);
            let (_, gd) = model.discriminator_gradients(&x)?;
            opt_d.step(&mut model.discriminator.params_mut(), &gd)?;
            let (_, gg) = model.generator_gradients(&x)?;
            opt_g.step(&mut model.generator_params_mut(), &gg)?;
        }
        let v = model.generator_loss_chunked(&val, chunk)?;
        val_losses.push(v);
        progress(epoch, v);
        if stopper.observe(epoch, v) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let history = TrainHistory {
        initial_val: initial,
        val_losses,
        best_epoch: stopper.best_epoch(),
        best_val: stopper.best(),
    };
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::SourceId;

    fn toy_config() -> ExtractorConfig {
        ExtractorConfig {
            input_dim: 8,
            latent_dim: 3,
            encoder_hidden: vec![6],
            disc_hidden: vec![5, 4],
            ..ExtractorConfig::default()
        }
    }

    #[test]
    fn default_dimensions() {
        let c = ExtractorConfig::default();
        assert_eq!(c.latent_dim, 70);
        assert_eq!(c.encoder_widths(), vec![1600, 512, 128, 70]);
        assert_eq!(c.decoder_widths(), vec![70, 128, 512, 1600]);
        assert_eq!(c.disc_widths(), vec![1600, 256, 64, 1]);
        assert_eq!((c.w_adv, c.w_rec), (1.0, 50.0));
        assert_eq!(c.schedule.epochs, 100);
        assert_eq!((c.schedule.adam.lr, c.schedule.adam.beta1, c.schedule.adam.beta2), (0.001, 0.5, 0.999));
    }

    #[test]
    fn config_kv_round_trip() {
        let c = toy_config();
        assert_eq!(ExtractorConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut kv = c.to_kv();
        kv.set("bogus", 1);
        assert!(ExtractorConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn toy_generator_objective() {
        let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        let l = generator_objective(&t(&[1.0, 0.0]), &t(&[0.0, 0.0]), &t(&[1.0]), &t(&[0.0]), 1.0, 50.0).unwrap();
        assert_eq!(l, 26.0);
        let x = t(&[0.2, 0.4]);
        assert_eq!(generator_objective(&x, &x, &t(&[0.3]), &t(&[0.3]), 1.0, 50.0).unwrap(), 0.0);
        let xh = t(&[0.0, 0.4]);
        let only_rec = generator_objective(&x, &xh, &t(&[0.9]), &t(&[0.1]), 0.0, 50.0).unwrap();
        assert!((only_rec - 50.0 * nn::mse(&x, &xh).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn discriminator_objective_examples() {
        let t = |v: f64| Tensor::scalar(v);
        assert_eq!(discriminator_objective(&t(1.0), &t(0.0)), 0.0);
        assert_eq!(discriminator_objective(&t(0.5), &t(0.5)), 1.0);
        assert!((discriminator_objective(&t(0.8), &t(0.3)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let m = FeatureExtractor::new(toy_config(), 1).unwrap();
        let x = vec![0.0; 8];
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        assert_eq!(m.encode(&x).unwrap().len(), 3);
        let mut y = x.clone();
        y[2] = 1.0;
        assert_ne!(m.encode(&x).unwrap(), m.encode(&y).unwrap());
        let r = m.reconstruct(&y).unwrap();
        assert_eq!(r.len(), 8);
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.encode(&[0.0; 7]).is_err());
    }

    #[test]
    fn guards_on_training_data() {
        let c = toy_config();
        assert!(matches!(train_extractor(&[], &c, 0), Err(ExtractorError::EmptyDataset)));
        let bad = vec![
            EncodedPacket {
                values: vec![0.0; 8],
                label: Some(Label::Normal),
                source_id: SourceId::default(),
            },
            EncodedPacket {
                values: vec![0.0; 8],
                label: Some(Label::Anomaly),
                source_id: SourceId::default(),
            },
        ];
        assert!(matches!(train_extractor(&bad, &c, 0), Err(ExtractorError::AnomalyInTrainingSet(1))));
    }
}
