//! AUROC, score histograms and the evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::packet::{Label, SourceId};

pub const HIST_BINS: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUROC needs at least one positive and one negative sample")]
    OneClassOnly,
    #[error("sample {0} has no label")]
    Unlabeled(usize),
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("report line {line}: {why}")]
    Parse { line: usize, why: String },
    #[error("i/o failure: {0}")]
    Io(String),
}

/// One scored input; higher score means more anomalous.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Option<Label>,
    pub source_id: SourceId,
}

/// Area under the ROC curve via the rank-sum statistic with average ranks for
/// ties. Ranks are kept doubled so every intermediate is an integer.
pub fn auroc(scores: &[(f64, bool)]) -> Result<f64, MetricsError> {
    if let Some(&(s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(s));
    }
    let n_pos = scores.iter().filter(|(_, p)| *p).count() as u128;
    let n_neg = scores.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]].0 == scores[order[i]].0 {
            j += 1;
        }
        // positions i..j hold 1-based ranks i+1..=j; twice their mean is i+1+j
        let rank2 = (i + 1 + j) as u128;
        let pos = order[i..j].iter().filter(|&&k| scores[k].1).count() as u128;
        rank2_pos += rank2 * pos;
        i = j;
    }
    let u2 = rank2_pos - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Counts per 50 equal-width bins over [0, 1]; 1.0 falls in the last bin.
pub fn histogram(scores: impl IntoIterator<Item = f64>) -> Vec<u64> {
    let mut h = vec![0u64; HIST_BINS];
    for s in scores {
        let b = ((s.clamp(0.0, 1.0) * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1);
        h[b] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auroc: f64,
    /// Anomaly count.
    pub n_pos: usize,
    /// Normal count.
    pub n_neg: usize,
    pub hist_normal: Vec<u64>,
    pub hist_anomaly: Vec<u64>,
}

/// Builds the report from labeled samples.
pub fn evaluate(scored: &[ScoredSample]) -> Result<EvalReport, MetricsError> {
    let mut pairs = Vec::with_capacity(scored.len());
    for (i, s) in scored.iter().enumerate() {
        let label = s.label.ok_or(MetricsError::Unlabeled(i))?;
        pairs.push((s.score, label == Label::Anomaly));
    }
    let auroc = auroc(&pairs)?;
    let pick = |want: bool| pairs.iter().filter(move |p| p.1 == want).map(|p| p.0);
    Ok(EvalReport {
        auroc,
        n_pos: pick(true).count(),
        n_neg: pick(false).count(),
        hist_normal: histogram(pick(false)),
        hist_anomaly: histogram(pick(true)),
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "auroc: {}", self.auroc).unwrap();
        writeln!(s, "n_pos: {}", self.n_pos).unwrap();
        writeln!(s, "n_neg: {}", self.n_neg).unwrap();
        writeln!(s, "bins: {HIST_BINS}").unwrap();
        writeln!(s, "histogram:").unwrap();
        writeln!(s, "bin_lo,bin_hi,normal,anomaly").unwrap();
        for b in 0..HIST_BINS {
            let lo = b as f64 / HIST_BINS as f64;
            let hi = (b + 1) as f64 / HIST_BINS as f64;
            writeln!(s, "{lo:.2},{hi:.2},{},{}", self.hist_normal[b], self.hist_anomaly[b]).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MetricsError> {
        let err = |line: usize, why: &str| MetricsError::Parse { line: line + 1, why: why.to_string() };
        let lines: Vec<&str> = text.lines().collect();
        let field = |i: usize, key: &str| -> Result<&str, MetricsError> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(": "))
                .ok_or_else(|| err(i, &format!("expected `{key}: ...`")))
        };
        let auroc = field(0, "auroc")?.parse().map_err(|_| err(0, "bad auroc"))?;
        let n_pos = field(1, "n_pos")?.parse().map_err(|_| err(1, "bad n_pos"))?;
        let n_neg = field(2, "n_neg")?.parse().map_err(|_| err(2, "bad n_neg"))?;
        let bins: usize = field(3, "bins")?.parse().map_err(|_| err(3, "bad bins"))?;
        if bins != HIST_BINS {
            return Err(err(3, "unsupported bin count"));
        }
        let mut hist_normal = Vec::with_capacity(bins);
        let mut hist_anomaly = Vec::with_capacity(bins);
        for i in 6..6 + bins {
            let line = lines.get(i).ok_or_else(|| err(i, "missing histogram row"))?;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(err(i, "expected four columns"));
            }
            hist_normal.push(cols[2].parse().map_err(|_| err(i, "bad count"))?);
            hist_anomaly.push(cols[3].parse().map_err(|_| err(i, "bad count"))?);
        }
        Ok(EvalReport {
            auroc,
            n_pos,
            n_neg,
            hist_normal,
            hist_anomaly,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        fs::write(path, self.to_text()).map_err(|e| MetricsError::Io(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, MetricsError> {
        let text = fs::read_to_string(path).map_err(|e| MetricsError::Io(e.to_string()))?;
        Self::from_text(&text)
    }
}

/// `source_file,index,score,label` per sample.
pub fn scores_csv(scored: &[ScoredSample]) -> String {
    let mut s = String::from("source_file,index,score,label\n");
    for x in scored {
        writeln!(s, "{},{},{},{}", x.source_id.file, x.source_id.index, x.score, Label::code(x.label)).unwrap();
    }
    s
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoredSample>, MetricsError> {
    let mut lines = text.lines();
    if lines.next() != Some("source_file,index,score,label") {
        return Err(MetricsError::Parse { line: 1, why: "unexpected header".into() });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |why: &str| MetricsError::Parse { line: i + 2, why: why.into() };
            // file names may contain commas; the last three fields never do
            let mut it = l.rsplitn(4, ',');
            let label = it.next().ok_or_else(|| err("missing label"))?;
            let score = it.next().ok_or_else(|| err("missing score"))?;
            let index = it.next().ok_or_else(|| err("missing index"))?;
            let file = it.next().ok_or_else(|| err("missing source file"))?;
            Ok(ScoredSample {
                score: score.parse().map_err(|_| err("bad score"))?,
                label: Label::parse_code(label).map_err(|e| err(&e))?,
                source_id: SourceId { file: file.to_string(), index: index.parse().map_err(|_| err("bad index"))? },
            })
        })
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
