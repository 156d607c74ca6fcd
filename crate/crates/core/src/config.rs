//! Plain-text `key = value` settings.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are namespaced
//! by module (`train.lr`, `specaug.f_pct`, …). Consumers `take` the keys they
//! understand and then call [`KeyValues::finish`], which rejects leftovers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate key {0:?}")]
    Duplicate(String),
    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("invalid value {value:?} for {key}: {msg}")]
    Invalid { key: String, value: String, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("bad key {k:?}"),
                });
            }
            if kv.entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
        }
        Ok(kv)
    }

    /// Canonical form: sorted keys, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Removes and parses `key`, if present.
    pub fn take_parsed<V: FromStr>(&mut self, key: &str) -> Result<Option<V>, ConfigError>
    where
        V::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: V::Err| ConfigError::Invalid {
                key: key.to_string(),
                msg: e.to_string(),
                value: v,
            }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<(), ConfigError>
    where
        V::Err: Display,
    {
        if let Some(v) = self.take_parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn take_required<V: FromStr>(&mut self, key: &str) -> Result<V, ConfigError>
    where
        V::Err: Display,
    {
        self.take_parsed(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma-separated list.
    pub fn take_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>, ConfigError>
    where
        V::Err: Display,
    {
        let Some(v) = self.entries.remove(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|e: V::Err| ConfigError::Invalid {
                    key: key.to_string(),
                    value: v.clone(),
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Splits off every key under `prefix.`, leaving the rest.
    pub fn split_namespace(&mut self, prefix: &str) -> KeyValues {
        let dotted = format!("{prefix}.");
        let (inside, outside) = std::mem::take(&mut self.entries)
            .into_iter()
            .partition(|(k, _)| k.starts_with(&dotted));
        self.entries = outside;
        KeyValues { entries: inside }
    }

    pub fn merge(&mut self, other: KeyValues) {
        self.entries.extend(other.entries);
    }

    pub fn finish(self) -> Result<(), ConfigError> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(self.entries.into_keys().collect()))
        }
    }
}

pub fn join_list<V: Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
