//! Flat `key = value` configuration text.
//!
//! Lines starting with `#` are comments. Keys are dotted (`flow.epochs`).
//! Stage configs serialize to the same form; the sorted text doubles as the
//! input of the config fingerprint.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("key {key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("missing key {0}")]
    Missing(String),
    #[error("invalid setting: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvMap(map))
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn set_list<T: Display>(&mut self, key: impl Into<String>, values: &[T]) {
        let s = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        self.0.insert(key.into(), s);
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|s| s.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(|k| k.as_str())
    }

    /// Overwrites entries with those of `other`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    /// Entries under `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvMap {
        let p = format!("{prefix}.");
        KvMap(
            self.0
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn with_prefix(&self, prefix: &str) -> KvMap {
        KvMap(
            self.0
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        )
    }

    /// Parses `key` into `*slot` when present.
    pub fn read<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.0.get(key) {
            *slot = v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
            })?;
        }
        Ok(())
    }

    pub fn read_list<T: FromStr>(&self, key: &str, slot: &mut Vec<T>) -> Result<(), ConfigError> {
        if let Some(v) = self.0.get(key) {
            let bad = || ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
            };
            *slot = if v.trim().is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad()))
                    .collect::<Result<_, _>>()?
            };
        }
        Ok(())
    }

    /// Fails on any key not in `known`.
    pub fn ensure_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.0.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}
