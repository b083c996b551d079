//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are checked
//! against a caller-supplied list; repeated keys are an error.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !allowed.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{key}` (allowed: {})",
                    n + 1,
                    allowed.join(", ")
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>, allowed: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(&text, allowed)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    /// Comma-separated list value of `key`, if present.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Overwrites `target` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *target = v;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
