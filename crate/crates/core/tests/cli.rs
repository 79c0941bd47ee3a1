use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowgate::harness::latent::{LatentLabel, LatentSet};
use flowgate::harness::metrics::{parse_scores_csv, EvalReport};
use flowgate::packet::dataset::read_dataset;
use flowgate::packet::Label;

fn flowgate(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_flowgate"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = flowgate(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stage_by_stage_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["make-corpus", "--out", "c", "--seed", "9", "--n-normal", "200", "--n-test-normal", "30", "--n-anomaly", "30", "--pcap"]);
    assert!(d.join("c/normal.pcap").exists());

    // captures round-trip through preprocessing to the same vectors
    ok(d, &["preprocess", "--in", "c/normal.pcap", "--out", "normal.csv", "--label", "0"]);
    let from_pcap = read_dataset(&d.join("normal.csv")).unwrap();
    let from_csv = read_dataset(&d.join("c/train.csv")).unwrap();
    assert_eq!(from_pcap.len(), 230);
    assert!(from_pcap.iter().zip(&from_csv).all(|(a, b)| a.values == b.values && a.label == Some(Label::Normal)));

    fs::write(d.join("ext.conf"), "latent_dim = 6\nencoder_hidden = 24,12\ndisc_hidden = 12,6\n").unwrap();
    fs::write(d.join("flow.conf"), "blocks = 2\nhidden = 8,8\n").unwrap();
    fs::write(d.join("cls.conf"), "hidden = 6,4\n").unwrap();
    ok(d, &["train-extractor", "--data", "c/train.csv", "--out", "ext.ckpt", "--seed", "1", "--config", "ext.conf", "--epochs", "2"]);
    ok(d, &["train-flow", "--latents-from", "ext.ckpt", "--data", "c/train.csv", "--out", "flow.ckpt", "--seed", "1", "--config", "flow.conf", "--epochs", "2"]);
    ok(d, &[
        "synthesize", "--flow", "flow.ckpt", "--extractor", "ext.ckpt", "--data", "c/train.csv", "--mu", "-9", "--sigma", "5",
        "--ratio", "0.5", "--seed", "1", "--out", "pseudo.csv", "--normals-out", "normals.csv",
    ]);
    let pseudo = LatentSet::read(&d.join("pseudo.csv")).unwrap();
    assert_eq!((pseudo.len(), pseudo.dim), (100, 6));
    assert!(pseudo.labels.iter().all(|l| *l == Some(LatentLabel::Pseudo)));

    ok(d, &["train-classifier", "--normals", "normals.csv", "--pseudo", "pseudo.csv", "--out", "cls.ckpt", "--seed", "1", "--config", "cls.conf", "--epochs", "2"]);
    let stdout = ok(d, &["infer", "--extractor", "ext.ckpt", "--classifier", "cls.ckpt", "--data", "c/test.csv", "--out", "scores.csv", "--threshold", "0.5"]);
    assert!(stdout.contains("threshold 0.5: "));
    let scores = parse_scores_csv(&fs::read_to_string(d.join("scores.csv")).unwrap()).unwrap();
    assert_eq!(scores.len(), 60);

    ok(d, &["eval", "--scores", "scores.csv", "--out", "report.txt"]);
    let report = EvalReport::read(&d.join("report.txt")).unwrap();
    assert_eq!((report.n_pos, report.n_neg), (30, 30));
    assert!((0.0..=1.0).contains(&report.auroc));

    // real anomalies never reach classifier training
    let bad = flowgate(d, &["train-classifier", "--normals", "normals.csv", "--pseudo", "anomalous.csv", "--out", "x.ckpt"]);
    assert!(!bad.status.success());
    let mut tainted = pseudo.clone();
    tainted.labels[0] = Some(LatentLabel::Anomaly);
    tainted.write(&d.join("anomalous.csv")).unwrap();
    let bad = flowgate(d, &["train-classifier", "--normals", "normals.csv", "--pseudo", "anomalous.csv", "--out", "x.ckpt"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("real anomaly"));

    // the extractor refuses anomalous training rows
    let bad = flowgate(d, &["train-extractor", "--data", "c/test.csv", "--out", "x.ckpt", "--config", "ext.conf", "--epochs", "1"]);
    assert!(!bad.status.success());
}

#[test]
fn pipeline_subcommand_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["make-corpus", "--out", "c", "--seed", "3", "--n-normal", "160", "--n-test-normal", "20", "--n-anomaly", "20"]);
    let sets = [
        "extractor.latent_dim=6",
        "extractor.encoder_hidden=24,12",
        "extractor.disc_hidden=12,6",
        "extractor.epochs=1",
        "flow.blocks=2",
        "flow.hidden=8,8",
        "flow.epochs=1",
        "classifier.hidden=6,4",
        "classifier.epochs=1",
        "synthesis.noise_grid=-9:5,0:1",
        "synthesis.ratios=0.5,1",
    ];
    let mut args = vec!["--sequential", "pipeline", "--train", "c/train.csv", "--test", "c/test.csv", "--work-dir", "run", "--seed", "4"];
    for s in &sets {
        args.extend(["--set", s]);
    }
    let stdout = ok(d, &args);
    assert_eq!(stdout.lines().count(), 1 + 4);
    assert_eq!(fs::read_to_string(d.join("run/summary.txt")).unwrap(), stdout);
    let conf = fs::read_to_string(d.join("run/pipeline.conf")).unwrap();
    assert!(conf.contains("flow.dim = 6") && conf.contains("classifier.input_dim = 6"), "{conf}");

    // the written config reproduces the run
    let again = ok(d, &["pipeline", "--config", "run/pipeline.conf", "--no-resume"]);
    assert_eq!(again, stdout);

    let bad = flowgate(d, &["pipeline", "--train", "c/train.csv", "--test", "c/test.csv", "--set", "flow.dim=5", "--work-dir", "bad"]);
    assert!(!bad.status.success());
}
