//! Central-difference checks of every network's tape gradients on small
//! randomized instances. Each check returns its max relative error.

use flowgate::classifier::{ClassifierConfig, ClassifierModel};
use flowgate::extractor::{ExtractorConfig, FeatureExtractor};
use flowgate::flow::{FlowConfig, FlowModel};
use flowgate::nn::gradcheck::{max_relative_error, numeric_gradient};
use flowgate::nn::{mse, Activation, GradTape, Mlp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{flatten, param_grad_error, FD_STEP};

pub const TOL: f64 = 1e-4;

/// Every check by name.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("activations", activations()),
        ("extractor generator", extractor_generator()),
        ("extractor discriminator", extractor_discriminator()),
        ("flow scale subnet", flow_scale_subnet()),
        ("flow nll", flow_nll()),
        ("classifier", classifier()),
    ]
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn mlp_mse_grads(net: &Mlp, x: &Tensor, target: &Tensor) -> (Vec<Tensor>, Tensor) {
    let mut tape = GradTape::new();
    let bound = net.bind(&mut tape, true);
    let xi = tape.input(x.clone());
    let t = tape.constant_ref(target);
    let y = bound.forward(&mut tape, xi).unwrap();
    let loss = tape.mse(y, t).unwrap();
    let g = tape.backward(loss).unwrap();
    (bound.grads(&g), g.wrt(xi))
}

/// Worst error over parameters and inputs of a two-layer net, per activation.
pub fn activations() -> f64 {
    let mut worst: f64 = 0.0;
    let acts = [Activation::Linear, Activation::Relu, Activation::LeakyRelu, Activation::Tanh, Activation::Sigmoid];
    for (k, &act) in acts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let net = Mlp::new(&[5, 4, 3], act, act, &mut rng);
        let x = random(&[6, 5], -1.0, 1.0, &mut rng);
        let target = random(&[6, 3], -1.0, 1.0, &mut rng);
        let (pg, xg) = mlp_mse_grads(&net, &x, &target);
        worst = worst.max(param_grad_error(&net, &pg, |m| m.params_mut(), |m| mse(&m.forward(&x).unwrap(), &target).unwrap()));
        let numeric = numeric_gradient(
            |v| mse(&net.forward(&Tensor::new(vec![6, 5], v.to_vec()).unwrap()).unwrap(), &target).unwrap(),
            x.data(),
            FD_STEP,
        );
        worst = worst.max(max_relative_error(xg.data(), &numeric));
    }
    worst
}

pub fn toy_extractor() -> FeatureExtractor {
    let cfg = ExtractorConfig {
        input_dim: 8,
        latent_dim: 3,
        encoder_hidden: vec![6],
        disc_hidden: vec![5, 4],
        ..ExtractorConfig::default()
    };
    let mut m = FeatureExtractor::new(cfg, 11).unwrap();
    // zero biases put the decoder's ReLUs exactly on their kink for dead
    // encoder rows, where central differences are meaningless
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut jitter = |ps: Vec<&mut Tensor>| {
        for p in ps {
            p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    };
    jitter(m.generator_params_mut());
    jitter(m.discriminator.params_mut());
    m
}

pub fn extractor_generator() -> f64 {
    let m = toy_extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[5, 8], 0.0, 1.0, &mut rng);
    let (_, g) = m.generator_gradients(&x).unwrap();
    param_grad_error(&m, &g, |m| m.generator_params_mut(), |m| m.generator_loss(&x).unwrap())
}

pub fn extractor_discriminator() -> f64 {
    let m = toy_extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[5, 8], 0.0, 1.0, &mut rng);
    let (_, g) = m.discriminator_gradients(&x).unwrap();
    param_grad_error(&m, &g, |m| m.discriminator.params_mut(), |m| m.discriminator_loss(&x).unwrap())
}

pub fn flow_scale_subnet() -> f64 {
    // s = clamp · tanh(s_net(a)), regressed onto a fixed target
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Mlp::new(&[4, 8, 8, 4], Activation::Relu, Activation::Linear, &mut rng);
    let a = random(&[7, 4], -2.0, 2.0, &mut rng);
    let target = random(&[7, 4], -1.0, 1.0, &mut rng);
    let clamp = 2.0;
    let mut tape = GradTape::new();
    let bound = net.bind(&mut tape, true);
    let ai = tape.constant_ref(&a);
    let t = tape.constant_ref(&target);
    let raw = bound.forward(&mut tape, ai).unwrap();
    let th = tape.tanh(raw).unwrap();
    let s = tape.scale(th, clamp).unwrap();
    let loss = tape.mse(s, t).unwrap();
    let g = tape.backward(loss).unwrap();
    let value = |m: &Mlp| {
        let mut s = m.forward(&a).unwrap();
        s.data_mut().iter_mut().for_each(|v| *v = clamp * v.tanh());
        mse(&s, &target).unwrap()
    };
    param_grad_error(&net, &bound.grads(&g), |m| m.params_mut(), value)
}

pub fn flow_nll() -> f64 {
    let cfg = FlowConfig { dim: 4, blocks: 4, hidden: vec![6, 6], ..FlowConfig::default() };
    let mut flow = FlowModel::new(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // move off the identity initialization so every block contributes
    for p in flow.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let z = random(&[9, 4], -2.0, 2.0, &mut rng);
    let (value, g) = flow.nll_gradients(&z).unwrap();
    assert!((value - flow.nll(&z).unwrap()).abs() < 1e-12);
    assert!(flatten(&g).iter().any(|v| v.abs() > 1e-6));
    param_grad_error(&flow, &g, |m| m.params_mut(), |m| m.nll(&z).unwrap())
}

pub fn classifier() -> f64 {
    let cfg = ClassifierConfig { input_dim: 6, hidden: vec![5, 4], ..ClassifierConfig::default() };
    let m = ClassifierModel::new(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = random(&[10, 6], -2.0, 2.0, &mut rng);
    let y = Tensor::new(vec![10, 1], (0..10).map(|i| (i % 2) as f64).collect()).unwrap();
    let (_, g) = m.gradients(&z, &y).unwrap();
    param_grad_error(&m, &g, |m| m.net.params_mut(), |m| m.loss(&z, &y).unwrap())
}

