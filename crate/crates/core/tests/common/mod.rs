//! Oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use flowgate::nn::gradcheck::{max_relative_error, numeric_gradient};
use flowgate::nn::Tensor;

pub mod grads;

pub const FD_STEP: f64 = 1e-6;

/// Flattens parameter tensors into one vector.
pub fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Central-difference gradient of `loss` over every parameter of `model`,
/// where `params` exposes the parameters in analytic-gradient order.
pub fn numeric_param_gradient<M: Clone>(
    model: &M,
    params: impl Fn(&mut M) -> Vec<&mut Tensor>,
    loss: impl Fn(&M) -> f64,
) -> Vec<f64> {
    let mut base = model.clone();
    let flat: Vec<f64> = params(&mut base).iter().flat_map(|t| t.data().to_vec()).collect();
    numeric_gradient(
        |v| {
            let mut m = model.clone();
            let mut off = 0;
            for t in params(&mut m) {
                let n = t.len();
                t.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
            loss(&m)
        },
        &flat,
        FD_STEP,
    )
}

/// Max relative error between analytic parameter gradients and finite differences.
pub fn param_grad_error<M: Clone>(
    model: &M,
    analytic: &[Tensor],
    params: impl Fn(&mut M) -> Vec<&mut Tensor>,
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let numeric = numeric_param_gradient(model, params, loss);
    max_relative_error(&flatten(analytic), &numeric)
}

/// O(n²) pair count: wins count 1, ties ½.
pub fn brute_force_auroc(scores: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut twice = 0u64;
    for &p in &pos {
        for &n in &neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Writes a small labeled corpus as `train.csv` (normals) and `test.csv` (mixed).
pub fn write_corpus(dir: &std::path::Path, seed: u64, n_train: usize, n_test_normal: usize, n_anomaly: usize) {
    use flowgate::harness::corpus::make_synthetic_corpus;
    use flowgate::packet::dataset::write_dataset;
    let c = make_synthetic_corpus(seed, n_train + n_test_normal, n_anomaly);
    let (train, test_normal) = c.normal.split_at(n_train);
    write_dataset(train, &dir.join("train.csv")).unwrap();
    write_dataset(test_normal.iter().chain(&c.anomaly), &dir.join("test.csv")).unwrap();
}

/// Pipeline over `write_corpus` output with narrow networks and two epochs per stage.
pub fn tiny_pipeline(data: &std::path::Path, work: &std::path::Path, seed: u64) -> flowgate::harness::PipelineConfig {
    use flowgate::classifier::ClassifierConfig;
    use flowgate::extractor::ExtractorConfig;
    use flowgate::flow::FlowConfig;
    use flowgate::harness::PipelineConfig;
    let mut cfg = PipelineConfig {
        train: data.join("train.csv"),
        test: vec![data.join("test.csv")],
        work_dir: work.to_path_buf(),
        seed,
        noise_grid: vec![(-9.0, 5.0), (0.0, 1.0)],
        extractor: ExtractorConfig {
            latent_dim: 8,
            encoder_hidden: vec![32, 16],
            disc_hidden: vec![16, 8],
            ..ExtractorConfig::default()
        },
        flow: FlowConfig { dim: 8, blocks: 4, hidden: vec![16, 16], ..FlowConfig::default() },
        classifier: ClassifierConfig { input_dim: 8, hidden: vec![8, 4], ..ClassifierConfig::default() },
        ..PipelineConfig::default()
    };
    cfg.extractor.schedule.epochs = 2;
    cfg.flow.schedule.epochs = 2;
    cfg.classifier.schedule.epochs = 2;
    cfg
}
