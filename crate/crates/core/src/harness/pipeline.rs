//! End-to-end run: extractor → flow → synthesis → classifier → inference →
//! evaluation, with every trained stage checkpointed and resumable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::classifier::{train_classifier, ClassifierConfig, ClassifierModel};
use crate::config::{ConfigError, KvMap};
use crate::extractor::{normal_matrix, train_extractor_on, Encoder, ExtractorConfig, FeatureExtractor};
use crate::flow::{train_flow, FlowConfig, FlowModel};
use crate::nn::{NnError, Tensor};
use crate::packet::{capture_files, preprocess_files, read_dataset, EncodedPacket, Label, PacketError};
use crate::par::{map_indexed, Exec};
use crate::synthesis::{synthesize, NoiseSpec, SynthesisConfig};

use super::checkpoint::{digest_hex, fingerprint, Checkpoint, CheckpointReader, Stage};
use super::latent::{LatentLabel, LatentSet};
use super::metrics::{evaluate, mean_std, scores_csv, EvalReport, MetricsError, ScoredSample};
use super::store::{self, UPSTREAM_KEY};
use super::{derive_seed, tensor_digest, HarnessError};

/// Best per-dataset settings reported for the three public traffic sets, plus a unit-noise control.
pub const DEFAULT_NOISE_GRID: &[(f64, f64)] = &[(-9.0, 5.0), (-25.0, 5.0), (-100.0, 5.0), (0.0, 1.0)];

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Normal training traffic: a dataset CSV, a capture file, or a directory of captures.
    pub train: PathBuf,
    /// Labeled dataset CSVs.
    pub test: Vec<PathBuf>,
    /// Inputs whose rows are all treated as normal.
    pub test_normal: Vec<PathBuf>,
    /// Inputs whose rows are all treated as anomalous.
    pub test_anomaly: Vec<PathBuf>,
    pub work_dir: PathBuf,
    pub seed: u64,
    /// Independent repetitions; repetition 0 uses `seed` itself.
    pub repeats: usize,
    /// Reuse checkpoints whose config, seed and upstream digest match.
    pub resume: bool,
    pub noise_grid: Vec<(f64, f64)>,
    pub ratios: Vec<f64>,
    pub bypass_flow: bool,
    pub extractor: ExtractorConfig,
    pub flow: FlowConfig,
    pub classifier: ClassifierConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: PathBuf::new(),
            test: Vec::new(),
            test_normal: Vec::new(),
            test_anomaly: Vec::new(),
            work_dir: PathBuf::from("flowgate-run"),
            seed: 0,
            repeats: 1,
            resume: true,
            noise_grid: DEFAULT_NOISE_GRID.to_vec(),
            ratios: vec![0.5],
            bypass_flow: false,
            extractor: ExtractorConfig::default(),
            flow: FlowConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

fn paths(kv: &KvMap, key: &str) -> Result<Option<Vec<PathBuf>>, ConfigError> {
    let mut v: Vec<String> = Vec::new();
    if !kv.contains(key) {
        return Ok(None);
    }
    kv.read_list(key, &mut v)?;
    Ok(Some(v.into_iter().map(PathBuf::from).collect()))
}

fn parse_grid(s: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
    let bad = || ConfigError::BadValue {
        key: "synthesis.noise_grid".into(),
        value: s.to_string(),
    };
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (m, sd) = p.split_once(':').ok_or_else(bad)?;
            Ok((m.trim().parse().map_err(|_| bad())?, sd.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

const TOP_KEYS: &[&str] = &[
    "seed",
    "repeats",
    "resume",
    "work_dir",
    "data.train",
    "data.test",
    "data.test_normal",
    "data.test_anomaly",
    "synthesis.noise_grid",
    "synthesis.ratios",
    "synthesis.bypass_flow",
];

impl PipelineConfig {
    /// Reads the flat key set; stage keys live under `extractor.`, `flow.` and `classifier.`.
    /// Flow and classifier input widths follow `extractor.latent_dim` unless set.
    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        for k in kv.keys() {
            let staged = ["extractor.", "flow.", "classifier."].iter().any(|p| k.starts_with(p));
            if !staged && !TOP_KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey(k.to_string()));
            }
        }
        let mut c = PipelineConfig::default();
        kv.read("seed", &mut c.seed)?;
        kv.read("repeats", &mut c.repeats)?;
        kv.read("resume", &mut c.resume)?;
        if let Some(p) = kv.get_raw("work_dir") {
            c.work_dir = PathBuf::from(p);
        }
        if let Some(p) = kv.get_raw("data.train") {
            c.train = PathBuf::from(p);
        }
        if let Some(v) = paths(kv, "data.test")? {
            c.test = v;
        }
        if let Some(v) = paths(kv, "data.test_normal")? {
            c.test_normal = v;
        }
        if let Some(v) = paths(kv, "data.test_anomaly")? {
            c.test_anomaly = v;
        }
        if let Some(g) = kv.get_raw("synthesis.noise_grid") {
            c.noise_grid = parse_grid(g)?;
        }
        kv.read_list("synthesis.ratios", &mut c.ratios)?;
        kv.read("synthesis.bypass_flow", &mut c.bypass_flow)?;

        c.extractor = ExtractorConfig::from_kv(&kv.section("extractor"))?;
        let mut flow = kv.section("flow");
        if !flow.contains("dim") {
            flow.set("dim", c.extractor.latent_dim);
        }
        c.flow = FlowConfig::from_kv(&flow)?;
        let mut cls = kv.section("classifier");
        if !cls.contains("input_dim") {
            cls.set("input_dim", c.extractor.latent_dim);
        }
        c.classifier = ClassifierConfig::from_kv(&cls)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let join = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
        let mut kv = KvMap::new();
        kv.set("seed", self.seed);
        kv.set("repeats", self.repeats);
        kv.set("resume", self.resume);
        kv.set("work_dir", self.work_dir.display());
        kv.set("data.train", self.train.display());
        kv.set_list("data.test", &join(&self.test));
        kv.set_list("data.test_normal", &join(&self.test_normal));
        kv.set_list("data.test_anomaly", &join(&self.test_anomaly));
        let grid: Vec<String> = self.noise_grid.iter().map(|(m, s)| format!("{m}:{s}")).collect();
        kv.set_list("synthesis.noise_grid", &grid);
        kv.set_list("synthesis.ratios", &self.ratios);
        kv.set("synthesis.bypass_flow", self.bypass_flow);
        kv.merge(&self.extractor.to_kv().with_prefix("extractor"));
        kv.merge(&self.flow.to_kv().with_prefix("flow"));
        kv.merge(&self.classifier.to_kv().with_prefix("classifier"));
        kv
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.extractor.validate()?;
        self.flow.validate()?;
        self.classifier.validate()?;
        let z = self.extractor.latent_dim;
        if self.flow.dim != z || self.classifier.input_dim != z {
            return Err(ConfigError::Invalid(format!(
                "flow.dim ({}) and classifier.input_dim ({}) must equal extractor.latent_dim ({z})",
                self.flow.dim, self.classifier.input_dim
            )));
        }
        if self.repeats == 0 {
            return Err(ConfigError::Invalid("repeats must be at least 1".into()));
        }
        if self.noise_grid.is_empty() || self.ratios.is_empty() {
            return Err(ConfigError::Invalid("noise grid and ratio list must be non-empty".into()));
        }
        for &(mu, sigma) in &self.noise_grid {
            NoiseSpec::new(mu, sigma, 0).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for &r in &self.ratios {
            if !(r > 0.0 && r.is_finite()) {
                return Err(ConfigError::Invalid(format!("ratio {r} must be positive")));
            }
        }
        Ok(())
    }
}

/// Result of one (repeat, ratio, μ, σ) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub repeat: usize,
    pub ratio: f64,
    pub mu: f64,
    pub sigma: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub results: Vec<GridResult>,
    /// Mean/std AUROC per (ratio, μ, σ) as printed text.
    pub summary: String,
}

impl PipelineOutcome {
    pub fn best(&self) -> Option<&GridResult> {
        self.results.iter().max_by(|a, b| a.report.auroc.total_cmp(&b.report.auroc))
    }
}

/// Loads a dataset CSV or captures. `force` overrides every label.
pub fn load_packets(path: &Path, force: Option<Label>, exec: Exec) -> Result<Vec<EncodedPacket>, PacketError> {
    let is_csv = path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut packets = if is_csv {
        read_dataset(path)?
    } else {
        preprocess_files(&capture_files(path)?, force, exec)?.packets
    };
    if let Some(l) = force {
        packets.iter_mut().for_each(|p| p.label = Some(l));
    }
    Ok(packets)
}

const ENCODE_CHUNK: usize = 512;

/// Encodes packet vectors in fixed chunks.
pub fn encode_packets(encoder: &Encoder, x: &Tensor, exec: Exec) -> Result<Tensor, NnError> {
    let n = x.rows();
    let parts = map_indexed(exec, n.div_ceil(ENCODE_CHUNK), |k| {
        let idx: Vec<usize> = (k * ENCODE_CHUNK..((k + 1) * ENCODE_CHUNK).min(n)).collect();
        encoder.encode_batch(&x.select_rows(&idx)).map(Tensor::into_data)
    });
    let mut data = Vec::with_capacity(n * encoder.latent_dim());
    for p in parts {
        data.extend(p?);
    }
    Tensor::new(vec![n, encoder.latent_dim()], data)
}

/// Encoder plus classifier, loaded from the extractor and classifier checkpoints.
#[derive(Debug)]
pub struct InferenceModel {
    pub encoder: Encoder,
    pub classifier: ClassifierModel,
    /// Every table decoded while loading, in order.
    pub tables_read: Vec<String>,
}

impl InferenceModel {
    pub fn load(extractor_ckpt: &Path, classifier_ckpt: &Path) -> Result<Self, HarnessError> {
        let er = CheckpointReader::open_stage(extractor_ckpt, Stage::Extractor).map_err(HarnessError::stage("infer"))?;
        let cr = CheckpointReader::open_stage(classifier_ckpt, Stage::Classifier).map_err(HarnessError::stage("infer"))?;
        Self::from_readers(&er, &cr)
    }

    pub fn from_readers(er: &CheckpointReader, cr: &CheckpointReader) -> Result<Self, HarnessError> {
        let encoder = store::load_encoder(er).map_err(HarnessError::stage("infer"))?;
        let classifier = store::load_classifier(cr).map_err(HarnessError::stage("infer"))?;
        if encoder.latent_dim() != classifier.input_dim() {
            return Err(HarnessError::CheckpointMismatch {
                encoder: encoder.latent_dim(),
                classifier: classifier.input_dim(),
            });
        }
        let mut tables_read = er.accessed();
        tables_read.extend(cr.accessed());
        Ok(InferenceModel {
            encoder,
            classifier,
            tables_read,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.classifier.param_count()
    }

    pub fn score(&self, packets: &[EncodedPacket], exec: Exec) -> Result<Vec<ScoredSample>, HarnessError> {
        if packets.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<&[f64]> = packets.iter().map(|p| p.values.as_slice()).collect();
        let x = Tensor::from_rows(&rows).map_err(HarnessError::stage("infer"))?;
        let z = encode_packets(&self.encoder, &x, exec).map_err(HarnessError::stage("infer"))?;
        let scores = self.classifier.score_batch(&z, exec).map_err(HarnessError::stage("infer"))?;
        Ok(packets
            .iter()
            .zip(scores)
            .map(|(p, score)| ScoredSample {
                score,
                label: p.label,
                source_id: p.source_id.clone(),
            })
            .collect())
    }
}

/// Scores `packets` with the encoder and classifier only.
pub fn infer(
    extractor_ckpt: &Path,
    classifier_ckpt: &Path,
    packets: &[EncodedPacket],
    exec: Exec,
) -> Result<Vec<ScoredSample>, HarnessError> {
    InferenceModel::load(extractor_ckpt, classifier_ckpt)?.score(packets, exec)
}

/// Reuses `path` when it holds a `stage` checkpoint with the same config, seed and upstream digest.
fn reusable(path: &Path, stage: Stage, config_text: &str, seed: u64, upstream: &str) -> Option<CheckpointReader> {
    let r = CheckpointReader::open_stage(path, stage).ok()?;
    let same = r.fingerprint == fingerprint(config_text)
        && r.seed == seed
        && r.meta.get(UPSTREAM_KEY).map(String::as_str) == Some(upstream);
    same.then_some(r)
}

fn save(c: &Checkpoint, path: &Path, stage: &'static str) -> Result<CheckpointReader, HarnessError> {
    c.save(path).map_err(HarnessError::stage(stage))?;
    CheckpointReader::open(path).map_err(HarnessError::stage(stage))
}

fn io(stage: &'static str) -> impl FnOnce(std::io::Error) -> HarnessError {
    HarnessError::stage(stage)
}

fn num_tag(v: f64) -> String {
    format!("{v}").replace('-', "m").replace('.', "p")
}

/// File-name tag of one grid point, e.g. `r0p5_mum25_s5`.
pub fn run_tag(ratio: f64, mu: f64, sigma: f64) -> String {
    format!("r{}_mu{}_s{}", num_tag(ratio), num_tag(mu), num_tag(sigma))
}

struct Data {
    train: Vec<EncodedPacket>,
    test: Vec<EncodedPacket>,
}

fn load_data(cfg: &PipelineConfig, exec: Exec) -> Result<Data, HarnessError> {
    let pre = HarnessError::stage("preprocess");
    let train = load_packets(&cfg.train, None, exec).map_err(pre)?;
    let mut test = Vec::new();
    for p in &cfg.test {
        test.extend(load_packets(p, None, exec).map_err(HarnessError::stage("preprocess"))?);
    }
    for p in &cfg.test_normal {
        test.extend(load_packets(p, Some(Label::Normal), exec).map_err(HarnessError::stage("preprocess"))?);
    }
    for p in &cfg.test_anomaly {
        test.extend(load_packets(p, Some(Label::Anomaly), exec).map_err(HarnessError::stage("preprocess"))?);
    }
    if test.is_empty() {
        return Err(HarnessError::stage("evaluate")(MetricsError::OneClassOnly));
    }
    Ok(Data { train, test })
}

/// Runs every stage for each repeat, ratio and noise setting, writing
/// checkpoints, latent files, reports and a summary table under `work_dir`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    exec: Exec,
    log: &mut dyn FnMut(&str),
) -> Result<PipelineOutcome, HarnessError> {
    cfg.validate()?;
    let data = load_data(cfg, exec)?;
    log(&format!("loaded {} training and {} test packets", data.train.len(), data.test.len()));
    let x = normal_matrix(&data.train).map_err(HarnessError::stage("extractor"))?;
    let x_digest = tensor_digest(&x);

    let mut results = Vec::new();
    for repeat in 0..cfg.repeats {
        let seed = if repeat == 0 { cfg.seed } else { derive_seed(cfg.seed, &format!("repeat/{repeat}")) };
        let dir = if cfg.repeats == 1 { cfg.work_dir.clone() } else { cfg.work_dir.join(format!("run-{repeat}")) };
        fs::create_dir_all(&dir).map_err(io("pipeline"))?;
        results.extend(run_once(cfg, &data, &x, &x_digest, seed, repeat, &dir, exec, log)?);
    }
    let summary = summary_table(&results);
    fs::write(cfg.work_dir.join("summary.txt"), &summary).map_err(io("pipeline"))?;
    Ok(PipelineOutcome { results, summary })
}

#[allow(clippy::too_many_arguments)]
fn run_once(
    cfg: &PipelineConfig,
    data: &Data,
    x: &Tensor,
    x_digest: &str,
    seed: u64,
    repeat: usize,
    dir: &Path,
    exec: Exec,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<GridResult>, HarnessError> {
    // extractor
    let ext_path = dir.join("extractor.ckpt");
    let ext_seed = derive_seed(seed, "extractor");
    let ext_text = cfg.extractor.to_kv().to_text();
    let ext_reader = match cfg
        .resume
        .then(|| reusable(&ext_path, Stage::Extractor, &ext_text, ext_seed, x_digest))
        .flatten()
    {
        Some(r) => {
            log("extractor: reusing checkpoint");
            r
        }
        None => {
            let (model, hist) = train_extractor_on(x, &cfg.extractor, ext_seed, |e, v| log(&format!("extractor epoch {e}: val {v:.6}")))
                .map_err(HarnessError::stage("extractor"))?;
            log(&format!("extractor: best epoch {} val {:.6}", hist.best_epoch, hist.best_val));
            save(&store::extractor_checkpoint(&model, ext_seed, x_digest), &ext_path, "extractor")?
        }
    };
    let extractor: FeatureExtractor = store::load_extractor(&ext_reader).map_err(HarnessError::stage("extractor"))?;
    let ext_digest = ext_reader.digest();
    let z = encode_packets(&extractor.encoder, x, exec).map_err(HarnessError::stage("extractor"))?;
    LatentSet::from_tensor(&z, Some(LatentLabel::Normal))
        .write(&dir.join("train_latents.csv"))
        .map_err(HarnessError::stage("extractor"))?;

    // flow
    let flow_path = dir.join("flow.ckpt");
    let flow_seed = derive_seed(seed, "flow");
    let flow_text = cfg.flow.to_kv().to_text();
    let flow_reader = match cfg
        .resume
        .then(|| reusable(&flow_path, Stage::Flow, &flow_text, flow_seed, &ext_digest))
        .flatten()
    {
        Some(r) => {
            log("flow: reusing checkpoint");
            r
        }
        None => {
            let (model, hist) = train_flow(&z, &cfg.flow, flow_seed).map_err(HarnessError::stage("flow"))?;
            log(&format!("flow: best epoch {} val nll {:.4}", hist.best_epoch, hist.best_val));
            save(&store::flow_checkpoint(&model, &cfg.flow, flow_seed, &ext_digest), &flow_path, "flow")?
        }
    };
    let (flow, _): (FlowModel, _) = store::load_flow(&flow_reader).map_err(HarnessError::stage("flow"))?;
    let flow_digest = flow_reader.digest();

    let mut out = Vec::new();
    let syn_seed = derive_seed(seed, "synthesis");
    let cls_seed = derive_seed(seed, "classifier");
    let cls_text = cfg.classifier.to_kv().to_text();
    for &ratio in &cfg.ratios {
        for &(mu, sigma) in &cfg.noise_grid {
            let tag = run_tag(ratio, mu, sigma);
            let spec = NoiseSpec::new(mu, sigma, syn_seed).map_err(HarnessError::stage("synthesis"))?;
            let scfg = SynthesisConfig {
                ratio,
                oversample: ratio > 1.0,
                bypass_flow: cfg.bypass_flow,
            };
            let pseudo = synthesize(&flow, &z, &spec, &scfg, exec).map_err(HarnessError::stage("synthesis"))?;
            let pseudo_set = match &pseudo {
                Some(p) => LatentSet::from_tensor(p, Some(LatentLabel::Pseudo)),
                None => LatentSet { dim: z.cols(), rows: vec![], labels: vec![] },
            };
            pseudo_set
                .write(&dir.join(format!("pseudo_{tag}.csv")))
                .map_err(HarnessError::stage("synthesis"))?;

            let upstream = digest_hex(
                format!("{ext_digest}|{flow_digest}|{mu}|{sigma}|{ratio}|{}|{syn_seed}", cfg.bypass_flow).as_bytes(),
            );
            let cls_path = dir.join(format!("classifier_{tag}.ckpt"));
            if !(cfg.resume && reusable(&cls_path, Stage::Classifier, &cls_text, cls_seed, &upstream).is_some()) {
                let (model, hist) = train_classifier(Some(&z), pseudo.as_ref(), &cfg.classifier, cls_seed)
                    .map_err(HarnessError::stage("classifier"))?;
                log(&format!("classifier {tag}: best epoch {} val {:.5}", hist.best_epoch, hist.best_val));
                save(&store::classifier_checkpoint(&model, &cfg.classifier, cls_seed, &upstream), &cls_path, "classifier")?;
            }

            let scored = infer(&ext_path, &cls_path, &data.test, exec)?;
            let report = evaluate(&scored).map_err(HarnessError::stage("evaluate"))?;
            report.write(&dir.join(format!("report_{tag}.txt"))).map_err(HarnessError::stage("evaluate"))?;
            fs::write(dir.join(format!("scores_{tag}.csv")), scores_csv(&scored)).map_err(io("evaluate"))?;
            log(&format!("{tag}: auroc {:.4}", report.auroc));
            out.push(GridResult { repeat, ratio, mu, sigma, report });
        }
    }
    Ok(out)
}

/// One row per (ratio, μ, σ): mean and sample std of AUROC over repeats.
pub fn summary_table(results: &[GridResult]) -> String {
    let mut keys: Vec<(f64, f64, f64)> = Vec::new();
    for r in results {
        let k = (r.ratio, r.mu, r.sigma);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut s = String::new();
    writeln!(s, "{:>6} {:>8} {:>6} {:>10} {:>10} {:>5}", "ratio", "mu", "sigma", "auroc_mean", "auroc_std", "runs").unwrap();
    for (ratio, mu, sigma) in keys {
        let v: Vec<f64> = results
            .iter()
            .filter(|r| (r.ratio, r.mu, r.sigma) == (ratio, mu, sigma))
            .map(|r| r.report.auroc)
            .collect();
        let (m, sd) = mean_std(&v);
        writeln!(s, "{ratio:>6} {mu:>8} {sigma:>6} {m:>10.4} {sd:>10.4} {:>5}", v.len()).unwrap();
    }
    s
}
