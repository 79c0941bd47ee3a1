use flowgate::extractor::{train_extractor, ExtractorConfig};
use flowgate::flow::{train_flow, FlowConfig};
use flowgate::harness::corpus::make_synthetic_corpus;
use flowgate::nn::{mse, Tensor};
use flowgate::train::Schedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_extractor(epochs: usize) -> ExtractorConfig {
    ExtractorConfig {
        latent_dim: 8,
        encoder_hidden: vec![32, 16],
        disc_hidden: vec![16, 8],
        schedule: Schedule { epochs, batch_size: 32, ..Schedule::default() },
        ..ExtractorConfig::default()
    }
}

#[test]
fn extractor_training_improves_reconstruction() {
    let corpus = make_synthetic_corpus(11, 300, 0);
    let x = Tensor::from_rows(&corpus.normal.iter().map(|p| p.values.as_slice()).collect::<Vec<_>>()).unwrap();

    let (untrained, _) = train_extractor(&corpus.normal, &small_extractor(0), 2).unwrap();
    let (model, hist) = train_extractor(&corpus.normal, &small_extractor(15), 2).unwrap();
    assert!(hist.best_epoch > 0 && hist.best_val < hist.initial_val, "{hist:?}");

    let err = |m: &flowgate::extractor::FeatureExtractor| mse(&x, &m.reconstruct_batch(&x).unwrap()).unwrap();
    assert!(err(&model) < 0.5 * err(&untrained), "{} vs {}", err(&model), err(&untrained));

    let (again, _) = train_extractor(&corpus.normal, &small_extractor(15), 2).unwrap();
    assert_eq!(again, model);
}

fn shifted_gaussian(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
    let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    let data = (0..n * dim)
        .map(|k| {
            let e: f64 = StandardNormal.sample(&mut rng);
            shift[k % dim] + scale[k % dim] * e
        })
        .collect();
    Tensor::new(vec![n, dim], data).unwrap()
}

fn small_flow(ema_decay: f64) -> FlowConfig {
    FlowConfig {
        dim: 6,
        blocks: 4,
        hidden: vec![16, 16],
        ema_decay,
        schedule: Schedule { epochs: 20, batch_size: 64, ..Schedule::default() },
        ..FlowConfig::default()
    }
}

#[test]
fn flow_training_lowers_held_out_nll() {
    let z = shifted_gaussian(1500, 6, 8);
    let (avg, hist) = train_flow(&z, &small_flow(0.99), 1).unwrap();
    assert!(hist.best_epoch > 0 && hist.best_val < hist.initial_val, "{hist:?}");
    assert_eq!(hist.best_val, hist.val_losses[hist.best_epoch - 1]);

    let (again, _) = train_flow(&z, &small_flow(0.99), 1).unwrap();
    assert_eq!(again, avg);

    let (raw, raw_hist) = train_flow(&z, &small_flow(0.0), 1).unwrap();
    assert!(raw_hist.best_val < raw_hist.initial_val);
    assert_ne!(raw, avg);
}
