//! `key = value` configuration text.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{config, GaitError, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(format!("line {}: expected key=value, got '{}'", no + 1, raw));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return config(format!("line {}: duplicate key '{}'", no + 1, key));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| GaitError::Config(format!("cannot parse {} = '{}'", key, v))),
        }
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => {
                let trimmed = v.trim_matches(|c| c == '[' || c == ']');
                if trimmed.trim().is_empty() {
                    return Ok(Some(Vec::new()));
                }
                trimmed
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| GaitError::Config(format!("cannot parse {} = '{}'", key, v))))
                    .collect::<Result<Vec<T>>>()
                    .map(Some)
            }
        }
    }

    /// Errors when any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.entries.keys().next() {
            return config(format!("unknown configuration key '{}'", k));
        }
        Ok(())
    }
}

pub(crate) fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}
