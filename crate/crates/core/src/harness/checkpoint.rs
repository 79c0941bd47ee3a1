//! Versioned binary container for trained parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FLOWGATE1"  stage:u8  fingerprint:[u8;32]  seed:u64
//! meta_count:u32   { key:str value:str }*
//! table_count:u32  { name:str ndim:u32 dims:u64* }*
//! table data: f64 values, tables in directory order
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Nothing time-dependent is
//! written, so equal inputs give equal bytes. [`CheckpointReader`] decodes a
//! table only when asked and logs every table it decodes.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Mlp, Tensor};

pub const MAGIC: &[u8; 9] = b"FLOWGATE1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("unknown stage tag {0}")]
    UnknownStage(u8),
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("table {0} is missing")]
    MissingTable(String),
    #[error("table {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("table {0} holds non-finite values")]
    NonFinite(String),
    #[error("metadata key {0} is missing")]
    MissingMeta(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o failure on {path}: {why}")]
    Io { path: String, why: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Extractor,
    Flow,
    Classifier,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Extractor => 1,
            Stage::Flow => 2,
            Stage::Classifier => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self, CheckpointError> {
        match t {
            1 => Ok(Stage::Extractor),
            2 => Ok(Stage::Flow),
            3 => Ok(Stage::Classifier),
            other => Err(CheckpointError::UnknownStage(other)),
        }
    }
}

/// SHA-256 of the stage config text.
pub fn fingerprint(config_text: &str) -> [u8; 32] {
    Sha256::digest(config_text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a byte string, as hex.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub fingerprint: [u8; 32],
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
    /// Named tensors in write order.
    pub tables: Vec<(String, Tensor)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new(stage: Stage, config_text: &str, seed: u64) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("config".to_string(), config_text.to_string());
        meta.insert("producer".to_string(), format!("flowgate {}", env!("CARGO_PKG_VERSION")));
        Checkpoint {
            stage,
            fingerprint: fingerprint(config_text),
            seed,
            meta,
            tables: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tables.push((name.into(), t.clone()));
    }

    /// Adds `prefix.{layer}.weight` and `prefix.{layer}.bias` for every layer.
    pub fn push_mlp(&mut self, prefix: &str, net: &Mlp) {
        for (i, layer) in net.layers().iter().enumerate() {
            self.push(format!("{prefix}.{i}.weight"), &layer.weights);
            self.push(format!("{prefix}.{i}.bias"), &layer.bias);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(self.stage.tag());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tables.len() as u32).to_le_bytes());
        for (name, t) in &self.tables {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tables {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            why: e.to_string(),
        })
    }

    /// Decodes every table; for tooling and round-trip checks.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CheckpointError> {
        let r = CheckpointReader::from_bytes(bytes)?;
        let names: Vec<String> = r.table_names().map(str::to_string).collect();
        let tables = names
            .into_iter()
            .map(|n| r.tensor_any(&n).map(|t| (n, t)))
            .collect::<Result<_, _>>()?;
        Ok(Checkpoint {
            stage: r.stage,
            fingerprint: r.fingerprint,
            seed: r.seed,
            meta: r.meta.clone(),
            tables,
        })
    }
}

#[derive(Clone, Debug)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

/// Lazily decoding checkpoint view with an access log.
#[derive(Debug)]
pub struct CheckpointReader {
    pub stage: Stage,
    pub fingerprint: [u8; 32],
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
    order: Vec<String>,
    entries: BTreeMap<String, Entry>,
    bytes: Vec<u8>,
    accessed: RefCell<Vec<String>>,
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.b.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 string".into()))
    }
}

impl CheckpointReader {
    pub fn open(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            why: e.to_string(),
        })?;
        Self::from_bytes(bytes)
    }

    pub fn open_stage(path: &Path, stage: Stage) -> Result<Self, CheckpointError> {
        let r = Self::open(path)?;
        r.expect_stage(stage)?;
        Ok(r)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut c = Cursor { b: &bytes, pos: MAGIC.len() };
        let stage = Stage::from_tag(c.take(1)?[0])?;
        let fingerprint: [u8; 32] = c.take(32)?.try_into().unwrap();
        let seed = c.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..c.u32()? {
            let k = c.str()?;
            meta.insert(k, c.str()?);
        }
        let n_tables = c.u32()? as usize;
        let mut dir = Vec::with_capacity(n_tables.min(1 << 16));
        for _ in 0..n_tables {
            let name = c.str()?;
            let ndim = c.u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(CheckpointError::Malformed(format!("table {name} has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            dir.push((name, shape));
        }
        let mut offset = c.pos;
        let mut entries = BTreeMap::new();
        let mut order = Vec::with_capacity(dir.len());
        for (name, shape) in dir {
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| CheckpointError::Malformed(format!("table {name} is too large")))?;
            if entries.contains_key(&name) {
                return Err(CheckpointError::Malformed(format!("duplicate table {name}")));
            }
            order.push(name.clone());
            entries.insert(name, Entry { shape, offset });
            offset = offset.checked_add(len).ok_or(CheckpointError::Truncated)?;
        }
        if offset != bytes.len() {
            return Err(if offset > bytes.len() {
                CheckpointError::Truncated
            } else {
                CheckpointError::Malformed("trailing bytes".into())
            });
        }
        Ok(CheckpointReader {
            stage,
            fingerprint,
            seed,
            meta,
            order,
            entries,
            bytes,
            accessed: RefCell::new(Vec::new()),
        })
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<(), CheckpointError> {
        if self.stage != stage {
            return Err(CheckpointError::WrongStage {
                expected: stage,
                found: self.stage,
            });
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.shape.as_slice())
    }

    /// Decodes `name` after checking it has shape `expected`.
    pub fn tensor(&self, name: &str, expected: &[usize]) -> Result<Tensor, CheckpointError> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTable(name.to_string()))?;
        if e.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        self.decode(name, e)
    }

    fn tensor_any(&self, name: &str) -> Result<Tensor, CheckpointError> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTable(name.to_string()))?;
        self.decode(name, e)
    }

    fn decode(&self, name: &str, e: &Entry) -> Result<Tensor, CheckpointError> {
        self.accessed.borrow_mut().push(name.to_string());
        let n: usize = e.shape.iter().product();
        let data = self.bytes[e.offset..e.offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(e.shape.clone(), data).map_err(|_| CheckpointError::NonFinite(name.to_string()))
    }

    /// Overwrites the parameters of `net` from `prefix.{layer}.weight|bias`.
    pub fn load_mlp(&self, prefix: &str, net: &mut Mlp) -> Result<(), CheckpointError> {
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            layer.weights = self.tensor(&format!("{prefix}.{i}.weight"), layer.weights.shape())?;
            layer.bias = self.tensor(&format!("{prefix}.{i}.bias"), layer.bias.shape())?;
        }
        Ok(())
    }

    /// Names of every table decoded so far, in access order.
    pub fn accessed(&self) -> Vec<String> {
        self.accessed.borrow().clone()
    }

    /// Sum of element counts over all tables whose name starts with one of `prefixes`.
    pub fn param_count_with_prefix(&self, prefixes: &[&str]) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, e)| e.shape.iter().product::<usize>())
            .sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.entries.values().map(|e| e.shape.iter().product::<usize>()).sum()
    }

    pub fn digest(&self) -> String {
        digest_hex(&self.bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(Stage::Flow, "a = 1\n", 42);
        c.meta.insert("upstream".into(), "abc".into());
        c.push("x.0.weight", &Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.1, f64::MIN_POSITIVE, -0.0]).unwrap());
        c.push("x.0.bias", &Tensor::new(vec![2], vec![7.0, 8.0]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(bytes.clone()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((_, a), (_, b)) in c.tables.iter().zip(&back.tables) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.seed, 42);
        assert_eq!(back.fingerprint, fingerprint("a = 1\n"));
    }

    #[test]
    fn reader_checks_and_logs() {
        let r = CheckpointReader::from_bytes(sample().to_bytes()).unwrap();
        assert!(r.accessed().is_empty());
        assert!(matches!(r.tensor("x.0.bias", &[3]), Err(CheckpointError::ShapeMismatch { .. })));
        assert!(matches!(r.tensor("nope", &[1]), Err(CheckpointError::MissingTable(_))));
        r.tensor("x.0.bias", &[2]).unwrap();
        assert_eq!(r.accessed(), vec!["x.0.bias".to_string()]);
        assert!(matches!(r.expect_stage(Stage::Classifier), Err(CheckpointError::WrongStage { .. })));
        assert_eq!(r.total_param_count(), 8);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(CheckpointReader::from_bytes(b"FLOWGATE2xxxx".to_vec()), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            CheckpointReader::from_bytes(bytes[..bytes.len() - 1].to_vec()),
            Err(CheckpointError::Truncated)
        ));
        let mut bad = bytes.clone();
        bad[9] = 9;
        assert!(matches!(CheckpointReader::from_bytes(bad), Err(CheckpointError::UnknownStage(9))));
        let mut extra = bytes;
        extra.push(0);
        assert!(CheckpointReader::from_bytes(extra).is_err());
    }
}
