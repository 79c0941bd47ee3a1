//! Latent-vector CSV: header `z0,...,z{d-1},label`, one vector per row.
//! Label codes: 0 normal, 1 real anomaly, 2 pseudo-anomaly, empty unlabeled.
//! Values use the shortest round-trip decimal form, so files re-read exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::nn::Tensor;
use crate::packet::dataset::header_line;
use crate::packet::PacketError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentLabel {
    Normal,
    Anomaly,
    Pseudo,
}

impl LatentLabel {
    fn code(l: Option<LatentLabel>) -> &'static str {
        match l {
            Some(LatentLabel::Normal) => "0",
            Some(LatentLabel::Anomaly) => "1",
            Some(LatentLabel::Pseudo) => "2",
            None => "",
        }
    }

    fn parse(s: &str) -> Option<Option<LatentLabel>> {
        match s {
            "0" => Some(Some(LatentLabel::Normal)),
            "1" => Some(Some(LatentLabel::Anomaly)),
            "2" => Some(Some(LatentLabel::Pseudo)),
            "" => Some(None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Option<LatentLabel>>,
}

impl LatentSet {
    pub fn from_tensor(t: &Tensor, label: Option<LatentLabel>) -> Self {
        LatentSet {
            dim: t.cols(),
            rows: t.row_vectors().map(|r| r.to_vec()).collect(),
            labels: vec![label; t.rows()],
        }
    }

    /// `None` when the set is empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.rows.is_empty() {
            return None;
        }
        Tensor::from_rows(&self.rows).ok()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = header_line("z", self.dim);
        s.push('\n');
        for (r, l) in self.rows.iter().zip(&self.labels) {
            for v in r {
                write!(s, "{v},").unwrap();
            }
            s.push_str(LatentLabel::code(*l));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), PacketError> {
        fs::write(path, self.to_csv()).map_err(|e| PacketError::Io(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, PacketError> {
        let bad = |line: usize, why: &str| PacketError::MalformedRow { line, why: why.to_string() };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.last() != Some(&"label") || cols.len() < 2 {
            return Err(bad(1, "header must end with `label`"));
        }
        let dim = cols.len() - 1;
        if header != header_line("z", dim) {
            return Err(bad(1, "header must be z0..z{d-1},label"));
        }
        let mut set = LatentSet { dim, rows: Vec::new(), labels: Vec::new() };
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(bad(n, &format!("expected {} fields, found {}", dim + 1, fields.len())));
            }
            let row = fields[..dim]
                .iter()
                .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(n, "non-numeric or non-finite value"))?;
            let label = LatentLabel::parse(fields[dim]).ok_or_else(|| bad(n, "unknown label code"))?;
            set.rows.push(row);
            set.labels.push(label);
        }
        Ok(set)
    }

    pub fn read(path: &Path) -> Result<Self, PacketError> {
        let text = fs::read_to_string(path).map_err(|e| PacketError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
