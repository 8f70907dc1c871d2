//! Ordered `key=value` text records, one pair per line.
//!
//! Used for architecture headers, dataset headers, configs and manifests.
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvText {
    entries: Vec<(String, String)>,
}

impl KvText {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    /// Sets `key`, replacing an earlier value in place (last writer wins).
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format(format!("missing key '{key}'")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Format(format!("key '{key}': cannot parse '{raw}'")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Merges `other` on top of `self`.
    pub fn overlay(&mut self, other: &KvText) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    /// Single-line form: `k1=v1 k2=v2`. Values must not contain spaces.
    pub fn to_line(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut kv = Self::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Format(format!("expected key=value, got '{tok}'")))?;
            kv.set(k, v);
        }
        Ok(kv)
    }
}

impl std::fmt::Display for KvText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
