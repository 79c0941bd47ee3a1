//! Pieces shared by the three training loops: schedule, hold-out split, early stopping.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{ConfigError, KvMap};
use crate::nn::AdamConfig;

/// Epoch budget, batching, early stopping and optimizer settings for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 100,
            batch_size: 64,
            patience: 10,
            val_fraction: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

pub(crate) const SCHEDULE_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "patience",
    "val_fraction",
    "lr",
    "beta1",
    "beta2",
    "eps",
];

impl Schedule {
    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("patience", self.patience);
        kv.set("val_fraction", self.val_fraction);
        kv.set("lr", self.adam.lr);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("eps", self.adam.eps);
    }

    pub fn read_kv(&mut self, kv: &KvMap) -> Result<(), ConfigError> {
        kv.read("epochs", &mut self.epochs)?;
        kv.read("batch_size", &mut self.batch_size)?;
        kv.read("patience", &mut self.patience)?;
        kv.read("val_fraction", &mut self.val_fraction)?;
        kv.read("lr", &mut self.adam.lr)?;
        kv.read("beta1", &mut self.adam.beta1)?;
        kv.read("beta2", &mut self.adam.beta2)?;
        kv.read("eps", &mut self.adam.eps)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(ConfigError::Invalid("val_fraction must be in [0, 1)".into()));
        }
        self.adam
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Shuffles `0..n` and carves off a validation part. With fewer than two
/// samples, or a zero fraction, the training set doubles as validation.
pub fn holdout_split<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * fraction).round() as usize;
    if n < 2 || n_val == 0 {
        return (idx.clone(), idx);
    }
    let n_val = n_val.min(n - 1);
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Tracks the best held-out loss and signals when patience runs out.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    /// `initial` is the held-out loss before any update (epoch 0).
    pub fn new(patience: usize, initial: f64) -> Self {
        EarlyStopping {
            patience,
            best: initial,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Returns true when `loss` improves on the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.wait >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Held-out loss trajectory of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    /// Loss before the first update.
    pub initial_val: f64,
    /// One entry per completed epoch.
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, v) = holdout_split(100, 0.1, &mut rng);
        assert_eq!((t.len(), v.len()), (90, 10));
        let mut all: Vec<_> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (t, v) = holdout_split(1, 0.1, &mut rng);
        assert_eq!((t, v), (vec![0], vec![0]));
    }

    #[test]
    fn patience_counts_stale_epochs() {
        let mut es = EarlyStopping::new(2, 10.0);
        assert!(es.observe(1, 9.0));
        assert!(!es.observe(2, 9.5));
        assert!(!es.should_stop());
        assert!(!es.observe(3, 9.0));
        assert!(es.should_stop());
        assert_eq!((es.best(), es.best_epoch()), (9.0, 1));
    }
}
