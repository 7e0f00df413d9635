//! `key = value` configuration text: UTF-8 lines, `#` comments, list values
//! comma-separated.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key=value pairs. Keys are unique; later duplicates are an error.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
        v.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {v:?}")))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.require(key).map(Some),
        }
    }

    pub fn require_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
        v.split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key {key:?}: cannot parse list item {item:?}")))
            })
            .collect()
    }

    /// Errors on any key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    /// One `key = value` line per entry, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KvMap::parse("# model\ninput_size = 64\n\nstage_channels = 16, 32,64  # widths\n").unwrap();
        assert_eq!(kv.require::<usize>("input_size").unwrap(), 64);
        assert_eq!(kv.require_list::<usize>("stage_channels").unwrap(), vec![16, 32, 64]);
        assert!(kv.reject_unknown(&["input_size"]).is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(KvMap::parse("nonsense").is_err());
        assert!(KvMap::parse("a = 1\na = 2").is_err());
        let kv = KvMap::parse("a = x").unwrap();
        assert!(kv.require::<usize>("a").is_err());
        assert!(kv.require::<usize>("b").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let kv = KvMap::parse("b = 2\na = 1,2\n").unwrap();
        assert_eq!(KvMap::parse(&kv.to_text()).unwrap(), kv);
        assert_eq!(kv.to_text(), "a = 1,2\nb = 2\n");
    }
}
