//! Model ↔ checkpoint conversion.
//!
//! Table names: `encoder.*`, `decoder.*`, `discriminator.*` (extractor),
//! `flow.{block}.s.*` / `flow.{block}.t.*` (flow), `classifier.*`.
//! The stage config text travels in the `config` metadata entry and is the
//! source of every shape the loaders check against.

use crate::classifier::{ClassifierConfig, ClassifierModel, InputScaling};
use crate::config::KvMap;
use crate::extractor::{Encoder, ExtractorConfig, FeatureExtractor};
use crate::flow::{parity_mask, CouplingBlock, FlowConfig, FlowModel};
use crate::nn::{Activation, DenseLayer, Mlp};

use super::checkpoint::{Checkpoint, CheckpointError, CheckpointReader, Stage};

/// Metadata key naming the digest of whatever the stage was trained from.
pub const UPSTREAM_KEY: &str = "upstream";

fn zeroed_mlp(widths: &[usize], hidden: Activation, output: Activation) -> Mlp {
    let last = widths.len() - 2;
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| DenseLayer::zeroed(w[0], w[1], if i == last { output } else { hidden }))
        .collect();
    Mlp::from_layers(layers).expect("consecutive widths chain")
}

fn stage_config(r: &CheckpointReader) -> Result<KvMap, CheckpointError> {
    KvMap::parse(r.meta("config")?).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

fn bad_config(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Malformed(format!("stored config: {e}"))
}

pub fn extractor_checkpoint(m: &FeatureExtractor, seed: u64, upstream: &str) -> Checkpoint {
    let mut c = Checkpoint::new(Stage::Extractor, &m.config.to_kv().to_text(), seed);
    c.meta.insert(UPSTREAM_KEY.into(), upstream.into());
    c.push_mlp("encoder", m.encoder.net());
    c.push_mlp("decoder", &m.decoder);
    c.push_mlp("discriminator", &m.discriminator);
    c
}

pub fn extractor_config(r: &CheckpointReader) -> Result<ExtractorConfig, CheckpointError> {
    r.expect_stage(Stage::Extractor)?;
    ExtractorConfig::from_kv(&stage_config(r)?).map_err(bad_config)
}

/// Reads only the `encoder.*` tables.
pub fn load_encoder(r: &CheckpointReader) -> Result<Encoder, CheckpointError> {
    let cfg = extractor_config(r)?;
    let mut net = zeroed_mlp(&cfg.encoder_widths(), Activation::Relu, Activation::Linear);
    r.load_mlp("encoder", &mut net)?;
    Ok(Encoder::new(net))
}

pub fn load_extractor(r: &CheckpointReader) -> Result<FeatureExtractor, CheckpointError> {
    let config = extractor_config(r)?;
    let encoder = load_encoder(r)?;
    let mut decoder = zeroed_mlp(&config.decoder_widths(), Activation::Relu, Activation::Sigmoid);
    r.load_mlp("decoder", &mut decoder)?;
    let mut discriminator = zeroed_mlp(&config.disc_widths(), Activation::LeakyRelu, Activation::Sigmoid);
    r.load_mlp("discriminator", &mut discriminator)?;
    Ok(FeatureExtractor {
        config,
        encoder,
        decoder,
        discriminator,
    })
}

pub fn flow_checkpoint(m: &FlowModel, cfg: &FlowConfig, seed: u64, upstream: &str) -> Checkpoint {
    let mut c = Checkpoint::new(Stage::Flow, &cfg.to_kv().to_text(), seed);
    c.meta.insert(UPSTREAM_KEY.into(), upstream.into());
    for (k, b) in m.blocks.iter().enumerate() {
        c.push_mlp(&format!("flow.{k}.s"), &b.s_net);
        c.push_mlp(&format!("flow.{k}.t"), &b.t_net);
    }
    c
}

pub fn load_flow(r: &CheckpointReader) -> Result<(FlowModel, FlowConfig), CheckpointError> {
    r.expect_stage(Stage::Flow)?;
    let cfg = FlowConfig::from_kv(&stage_config(r)?).map_err(bad_config)?;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for k in 0..cfg.blocks {
        let mask = parity_mask(cfg.dim, k);
        let pass = mask.iter().filter(|&&m| m).count();
        let mut widths = vec![pass];
        widths.extend(&cfg.hidden);
        widths.push(cfg.dim - pass);
        let mut s = zeroed_mlp(&widths, Activation::Relu, Activation::Linear);
        let mut t = zeroed_mlp(&widths, Activation::Relu, Activation::Linear);
        r.load_mlp(&format!("flow.{k}.s"), &mut s)?;
        r.load_mlp(&format!("flow.{k}.t"), &mut t)?;
        blocks.push(CouplingBlock::from_parts(mask, s, t, cfg.clamp).map_err(bad_config)?);
    }
    let model = FlowModel::from_blocks(cfg.dim, blocks).map_err(bad_config)?;
    Ok((model, cfg))
}

pub fn classifier_checkpoint(m: &ClassifierModel, cfg: &ClassifierConfig, seed: u64, upstream: &str) -> Checkpoint {
    let mut c = Checkpoint::new(Stage::Classifier, &cfg.to_kv().to_text(), seed);
    c.meta.insert(UPSTREAM_KEY.into(), upstream.into());
    c.push("classifier.input.shift", &m.input.shift);
    c.push("classifier.input.scale", &m.input.scale);
    c.push_mlp("classifier", &m.net);
    c
}

pub fn load_classifier(r: &CheckpointReader) -> Result<ClassifierModel, CheckpointError> {
    r.expect_stage(Stage::Classifier)?;
    let cfg = ClassifierConfig::from_kv(&stage_config(r)?).map_err(bad_config)?;
    let mut net = zeroed_mlp(&cfg.widths(), Activation::Relu, Activation::Sigmoid);
    r.load_mlp("classifier", &mut net)?;
    let input = InputScaling {
        shift: r.tensor("classifier.input.shift", &[cfg.input_dim])?,
        scale: r.tensor("classifier.input.scale", &[cfg.input_dim])?,
    };
    Ok(ClassifierModel { input, net })
}
