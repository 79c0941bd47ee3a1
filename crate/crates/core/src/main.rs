use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flowgate::classifier::{predict_batch, train_classifier, ClassifierConfig, Prediction};
use flowgate::config::KvMap;
use flowgate::extractor::{normal_matrix, train_extractor_on, ExtractorConfig};
use flowgate::flow::{train_flow, FlowConfig};
use flowgate::harness::checkpoint::{digest_hex, CheckpointReader, Stage};
use flowgate::harness::corpus::{make_synthetic_corpus, synthetic_frames, write_pcap};
use flowgate::harness::latent::{LatentLabel, LatentSet};
use flowgate::harness::metrics::{evaluate, parse_scores_csv, scores_csv};
use flowgate::harness::pipeline::{encode_packets, load_packets};
use flowgate::harness::{derive_seed, infer, run_pipeline, store, tensor_digest, PipelineConfig};
use flowgate::packet::{capture_files, preprocess_files, write_dataset, Label};
use flowgate::par::Exec;
use flowgate::synthesis::{synthesize, NoiseSpec, SynthesisConfig};

#[derive(Parser)]
#[command(name = "flowgate", version, about = "Packet-level anomaly detection trained on normal traffic only")]
struct Cli {
    /// Run batch kernels on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ScheduleArgs {
    /// Stage config file (`key = value`, unprefixed stage keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ScheduleArgs {
    fn kv(&self) -> Result<KvMap> {
        let mut kv = match &self.config {
            Some(p) => KvMap::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => KvMap::new(),
        };
        if let Some(e) = self.epochs {
            kv.set("epochs", e);
        }
        if let Some(b) = self.batch {
            kv.set("batch_size", b);
        }
        if let Some(lr) = self.lr {
            kv.set("lr", lr);
        }
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Clean and canonicalize captures into a dataset CSV.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 0 (normal), 1 (anomaly) or none.
        #[arg(long, default_value = "none")]
        label: String,
    },
    /// Train the feature extractor on normal packets.
    TrainExtractor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sched: ScheduleArgs,
    },
    /// Train the flow on latents of the given packets.
    TrainFlow {
        #[arg(long = "latents-from")]
        extractor: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sched: ScheduleArgs,
    },
    /// Generate pseudo-anomaly latents.
    Synthesize {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        mu: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the normal latents here.
        #[arg(long)]
        normals_out: Option<PathBuf>,
        /// Permit ratios above 1.
        #[arg(long)]
        oversample: bool,
        /// Add the noise to latents directly, skipping the flow.
        #[arg(long)]
        bypass_flow: bool,
    },
    /// Train the classifier on normal and pseudo-anomaly latents.
    TrainClassifier {
        #[arg(long)]
        normals: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sched: ScheduleArgs,
    },
    /// Score packets with the encoder and classifier.
    Infer {
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Dataset CSV or captures.
        #[arg(long)]
        data: PathBuf,
        /// Per-sample scores CSV.
        #[arg(long)]
        out: PathBuf,
        /// Print NORMAL/ANOMALY counts at this threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Build an evaluation report from a labeled scores CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage end to end.
    Pipeline {
        /// Pipeline config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Retrain every stage even when a matching checkpoint exists.
        #[arg(long)]
        no_resume: bool,
    },
    /// Write the synthetic corpus: train.csv (normal) and test.csv (labeled).
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        n_normal: usize,
        #[arg(long, default_value_t = 1_000)]
        n_test_normal: usize,
        #[arg(long, default_value_t = 1_000)]
        n_anomaly: usize,
        /// Also write the raw frames as normal.pcap and anomaly.pcap.
        #[arg(long)]
        pcap: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match run(cli.cmd, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn write_latents(set: &LatentSet, path: &Path) -> Result<()> {
    set.write(path).with_context(|| format!("writing {}", path.display()))
}

fn run(cmd: Cmd, exec: Exec) -> Result<()> {
    match cmd {
        Cmd::Preprocess { input, out, label } => {
            let label = Label::parse_code(&label).map_err(anyhow::Error::msg)?;
            let files = capture_files(&input)?;
            let res = preprocess_files(&files, label, exec)?;
            let n = write_dataset(&res.packets, &out)?;
            for (reason, count) in &res.verdicts {
                eprintln!("{:>14}: {count}", reason.name());
            }
            println!("wrote {n} packets to {}", out.display());
        }
        Cmd::TrainExtractor { data, out, seed, sched } => {
            let cfg = ExtractorConfig::from_kv(&sched.kv()?)?;
            let packets = load_packets(&data, None, exec)?;
            let x = normal_matrix(&packets)?;
            let stage_seed = derive_seed(seed, "extractor");
            let (model, hist) = train_extractor_on(&x, &cfg, stage_seed, |e, v| log(&format!("epoch {e}: val {v:.6}")))?;
            store::extractor_checkpoint(&model, stage_seed, &tensor_digest(&x)).save(&out)?;
            println!("best epoch {} val {:.6}; wrote {}", hist.best_epoch, hist.best_val, out.display());
        }
        Cmd::TrainFlow { extractor, data, out, seed, sched } => {
            let reader = CheckpointReader::open_stage(&extractor, Stage::Extractor)?;
            let encoder = store::load_encoder(&reader)?;
            let mut kv = sched.kv()?;
            if !kv.contains("dim") {
                kv.set("dim", encoder.latent_dim());
            }
            let cfg = FlowConfig::from_kv(&kv)?;
            let packets = load_packets(&data, None, exec)?;
            let z = encode_packets(&encoder, &normal_matrix(&packets)?, exec)?;
            let stage_seed = derive_seed(seed, "flow");
            let (model, hist) = train_flow(&z, &cfg, stage_seed)?;
            store::flow_checkpoint(&model, &cfg, stage_seed, &reader.digest()).save(&out)?;
            println!("best epoch {} val nll {:.4}; wrote {}", hist.best_epoch, hist.best_val, out.display());
        }
        Cmd::Synthesize {
            flow,
            extractor,
            data,
            mu,
            sigma,
            ratio,
            seed,
            out,
            normals_out,
            oversample,
            bypass_flow,
        } => {
            let (flow, _) = store::load_flow(&CheckpointReader::open_stage(&flow, Stage::Flow)?)?;
            let encoder = store::load_encoder(&CheckpointReader::open_stage(&extractor, Stage::Extractor)?)?;
            let packets = load_packets(&data, None, exec)?;
            let z = encode_packets(&encoder, &normal_matrix(&packets)?, exec)?;
            let spec = NoiseSpec::new(mu, sigma, derive_seed(seed, "synthesis"))?;
            let cfg = SynthesisConfig { ratio, oversample, bypass_flow };
            let pseudo = synthesize(&flow, &z, &spec, &cfg, exec)?;
            let set = match &pseudo {
                Some(p) => LatentSet::from_tensor(p, Some(LatentLabel::Pseudo)),
                None => LatentSet { dim: z.cols(), rows: vec![], labels: vec![] },
            };
            write_latents(&set, &out)?;
            if let Some(p) = normals_out {
                write_latents(&LatentSet::from_tensor(&z, Some(LatentLabel::Normal)), &p)?;
            }
            println!("wrote {} pseudo-anomalies to {}", set.len(), out.display());
        }
        Cmd::TrainClassifier { normals, pseudo, out, seed, sched } => {
            let n = LatentSet::read(&normals)?;
            let p = LatentSet::read(&pseudo)?;
            if let Some(i) = n.labels.iter().chain(&p.labels).position(|l| *l == Some(LatentLabel::Anomaly)) {
                bail!("row {i} is labeled as a real anomaly; classifier training never uses real anomalies");
            }
            let mut kv = sched.kv()?;
            if !kv.contains("input_dim") {
                kv.set("input_dim", n.dim);
            }
            let cfg = ClassifierConfig::from_kv(&kv)?;
            let stage_seed = derive_seed(seed, "classifier");
            let upstream = digest_hex(format!("{}|{}", n.to_csv(), p.to_csv()).as_bytes());
            let (model, hist) = train_classifier(n.to_tensor().as_ref(), p.to_tensor().as_ref(), &cfg, stage_seed)?;
            store::classifier_checkpoint(&model, &cfg, stage_seed, &upstream).save(&out)?;
            println!("best epoch {} val {:.5}; wrote {}", hist.best_epoch, hist.best_val, out.display());
        }
        Cmd::Infer { extractor, classifier, data, out, threshold } => {
            let packets = load_packets(&data, None, exec)?;
            let scored = infer(&extractor, &classifier, &packets, exec)?;
            fs::write(&out, scores_csv(&scored))?;
            println!("scored {} packets; wrote {}", scored.len(), out.display());
            if let Some(t) = threshold {
                let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
                let preds = predict_batch(&scores, t)?;
                let anomalies = preds.iter().filter(|p| **p == Prediction::Anomaly).count();
                println!("threshold {t}: {anomalies} ANOMALY, {} NORMAL", preds.len() - anomalies);
            }
        }
        Cmd::Eval { scores, out } => {
            let text = fs::read_to_string(&scores).with_context(|| format!("reading {}", scores.display()))?;
            let report = evaluate(&parse_scores_csv(&text)?)?;
            match out {
                Some(p) => {
                    report.write(&p)?;
                    println!("auroc: {}", report.auroc);
                }
                None => print!("{}", report.to_text()),
            }
        }
        Cmd::Pipeline { config, set, seed, work_dir, train, test, repeats, no_resume } => {
            let mut kv = match &config {
                Some(p) => KvMap::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => KvMap::new(),
            };
            for s in &set {
                let (k, v) = s.split_once('=').with_context(|| format!("--set {s}: expected KEY=VALUE"))?;
                kv.set(k.trim(), v.trim());
            }
            if let Some(s) = seed {
                kv.set("seed", s);
            }
            if let Some(w) = work_dir {
                kv.set("work_dir", w.display());
            }
            if let Some(t) = train {
                kv.set("data.train", t.display());
            }
            if let Some(t) = test {
                kv.set("data.test", t.display());
            }
            if let Some(r) = repeats {
                kv.set("repeats", r);
            }
            if no_resume {
                kv.set("resume", false);
            }
            let cfg = PipelineConfig::from_kv(&kv)?;
            fs::create_dir_all(&cfg.work_dir)?;
            fs::write(cfg.work_dir.join("pipeline.conf"), cfg.to_kv().to_text())?;
            let outcome = run_pipeline(&cfg, exec, &mut |m| log(m))?;
            print!("{}", outcome.summary);
        }
        Cmd::MakeCorpus { out, seed, n_normal, n_test_normal, n_anomaly, pcap } => {
            fs::create_dir_all(&out)?;
            let c = make_synthetic_corpus(seed, n_normal + n_test_normal, n_anomaly);
            let (train, test_normal) = c.normal.split_at(n_normal);
            write_dataset(train, &out.join("train.csv"))?;
            write_dataset(test_normal.iter().chain(&c.anomaly), &out.join("test.csv"))?;
            if pcap {
                let (nf, af) = synthetic_frames(seed, n_normal + n_test_normal, n_anomaly);
                write_pcap(&nf, &out.join("normal.pcap"))?;
                write_pcap(&af, &out.join("anomaly.pcap"))?;
            }
            println!(
                "wrote {} training and {} test packets to {}",
                train.len(),
                test_normal.len() + c.anomaly.len(),
                out.display()
            );
        }
    }
    Ok(())
}
