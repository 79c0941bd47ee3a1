mod common;

use std::fs;
use std::path::Path;

use common::{tiny_pipeline, write_corpus};
use flowgate::classifier::{ClassifierConfig, ClassifierModel};
use flowgate::extractor::ExtractorError;
use flowgate::harness::checkpoint::{CheckpointReader, Stage};
use flowgate::harness::metrics::{evaluate, MetricsError};
use flowgate::harness::{run_pipeline, store, HarnessError, InferenceModel};
use flowgate::packet::dataset::read_dataset;
use flowgate::par::Exec;

fn corpus() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    write_corpus(d.path(), 21, 240, 40, 40);
    d
}

fn file_bytes(dir: &Path, suffix: &str) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let data = corpus();
    let work = tempfile::tempdir().unwrap();
    let a = tiny_pipeline(data.path(), &work.path().join("a"), 5);
    let b = tiny_pipeline(data.path(), &work.path().join("b"), 5);
    let ra = run_pipeline(&a, Exec::Parallel, &mut |_| {}).unwrap();
    let rb = run_pipeline(&b, Exec::Sequential, &mut |_| {}).unwrap();
    assert_eq!(ra.results, rb.results);
    assert_eq!(ra.summary, rb.summary);
    for suffix in [".ckpt", ".csv", ".txt"] {
        let fa = file_bytes(&a.work_dir, suffix);
        assert!(!fa.is_empty());
        assert_eq!(fa, file_bytes(&b.work_dir, suffix), "{suffix} files differ");
    }
}

#[test]
fn resume_reuses_every_checkpoint() {
    let data = corpus();
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline(data.path(), work.path(), 6);
    let first = run_pipeline(&cfg, Exec::default(), &mut |_| {}).unwrap();
    let before = file_bytes(work.path(), ".ckpt");
    let mut log = Vec::new();
    let second = run_pipeline(&cfg, Exec::default(), &mut |m| log.push(m.to_string())).unwrap();
    assert_eq!(first.results, second.results);
    assert_eq!(before, file_bytes(work.path(), ".ckpt"));
    assert!(log.iter().any(|l| l == "extractor: reusing checkpoint"));
    assert!(log.iter().any(|l| l == "flow: reusing checkpoint"));
    assert!(!log.iter().any(|l| l.starts_with("extractor epoch") || l.starts_with("classifier ")));

    // a changed stage config retrains that stage
    let mut changed = cfg.clone();
    changed.classifier.schedule.epochs = 3;
    let mut log = Vec::new();
    run_pipeline(&changed, Exec::default(), &mut |m| log.push(m.to_string())).unwrap();
    assert!(log.iter().any(|l| l == "flow: reusing checkpoint"));
    assert!(log.iter().any(|l| l.starts_with("classifier ")));
}

#[test]
fn anomalies_in_training_data_fail_the_extractor_stage() {
    let data = corpus();
    let work = tempfile::tempdir().unwrap();
    let mut cfg = tiny_pipeline(data.path(), work.path(), 1);
    cfg.train = data.path().join("test.csv");
    let err = run_pipeline(&cfg, Exec::default(), &mut |_| {}).unwrap_err();
    assert_eq!(err.stage_name(), Some("extractor"));
    assert!(matches!(err.source_as::<ExtractorError>(), Some(ExtractorError::AnomalyInTrainingSet(40))));
    assert!(err.to_string().starts_with("extractor stage: "));
}

#[test]
fn one_report_per_grid_point_and_repeat() {
    let data = corpus();
    let work = tempfile::tempdir().unwrap();
    let mut cfg = tiny_pipeline(data.path(), work.path(), 2);
    cfg.ratios = vec![0.5, 2.0];
    cfg.repeats = 2;
    let out = run_pipeline(&cfg, Exec::default(), &mut |_| {}).unwrap();
    assert_eq!(out.results.len(), 2 * 2 * 2);
    for r in 0..2 {
        let dir = work.path().join(format!("run-{r}"));
        assert_eq!(file_bytes(&dir, ".ckpt").len(), 2 + 4);
        for name in ["report_r0p5_mum9_s5.txt", "report_r2_mu0_s1.txt", "pseudo_r2_mu0_s1.csv"] {
            assert!(dir.join(name).exists(), "{name}");
        }
    }
    let rows: Vec<&str> = out.summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|l| l.trim_end().ends_with(" 2")));
    assert_eq!(fs::read_to_string(work.path().join("summary.txt")).unwrap(), out.summary);
    // repeats use different seeds
    assert_ne!(
        fs::read(work.path().join("run-0/extractor.ckpt")).unwrap(),
        fs::read(work.path().join("run-1/extractor.ckpt")).unwrap()
    );
}

#[test]
fn inference_reads_only_encoder_and_classifier() {
    let data = corpus();
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline(data.path(), work.path(), 3);
    run_pipeline(&cfg, Exec::default(), &mut |_| {}).unwrap();
    let ext = work.path().join("extractor.ckpt");
    let cls = work.path().join("classifier_r0p5_mu0_s1.ckpt");
    let m = InferenceModel::load(&ext, &cls).unwrap();
    assert!(!m.tables_read.is_empty());
    assert!(m.tables_read.iter().all(|t| t.starts_with("encoder.") || t.starts_with("classifier.")));
    assert!(m.tables_read.iter().any(|t| t.starts_with("classifier.")));

    let mut packets = read_dataset(&data.path().join("test.csv")).unwrap();
    packets.iter_mut().for_each(|p| p.label = None);
    let scored = m.score(&packets, Exec::default()).unwrap();
    assert_eq!(scored.len(), packets.len());
    assert!(scored.iter().all(|s| s.label.is_none() && (0.0..=1.0).contains(&s.score)));
    assert_eq!(evaluate(&scored), Err(MetricsError::Unlabeled(0)));
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let data = corpus();
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline(data.path(), work.path(), 4);
    run_pipeline(&cfg, Exec::default(), &mut |_| {}).unwrap();
    let ccfg = ClassifierConfig { input_dim: 6, hidden: vec![4], ..ClassifierConfig::default() };
    let model = ClassifierModel::new(&ccfg, 1).unwrap();
    let path = work.path().join("odd.ckpt");
    store::classifier_checkpoint(&model, &ccfg, 1, "none").save(&path).unwrap();
    let err = InferenceModel::load(&work.path().join("extractor.ckpt"), &path).unwrap_err();
    assert!(matches!(err, HarnessError::CheckpointMismatch { encoder: 8, classifier: 6 }));

    // swapped roles fail on the stage tag
    let err = InferenceModel::load(&path, &work.path().join("extractor.ckpt")).unwrap_err();
    assert_eq!(err.stage_name(), Some("infer"));
    assert!(CheckpointReader::open_stage(&path, Stage::Extractor).is_err());
}
