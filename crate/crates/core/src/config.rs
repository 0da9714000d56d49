//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Each consumer takes
//! the keys it understands; [`KeyValues::finish`] rejects whatever is left.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    taken: bool,
}

#[derive(Clone, Debug)]
pub struct KeyValues {
    source: String,
    entries: Vec<Entry>,
}

impl KeyValues {
    pub fn empty() -> Self {
        KeyValues { source: "<defaults>".into(), entries: Vec::new() }
    }

    pub fn parse(text: &str, source: impl Into<String>) -> Result<Self> {
        let source = source.into();
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected `key = value`", i + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("{source}:{}: empty key", i + 1)));
            }
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(Error::Config(format!(
                    "{source}:{}: key `{key}` already set on line {}",
                    i + 1,
                    prev.line
                )));
            }
            entries.push(Entry { key, value: v.trim().to_string(), line: i + 1, taken: false });
        }
        Ok(KeyValues { source, entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.display().to_string())
    }

    /// Raw value of `key`, marking it consumed.
    pub fn take_str(&mut self, key: &str) -> Option<String> {
        let e = self.entries.iter_mut().find(|e| e.key == key)?;
        e.taken = true;
        Some(e.value.clone())
    }

    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        let Some(e) = self.entries.iter_mut().find(|e| e.key == key) else {
            return Ok(None);
        };
        e.taken = true;
        e.value.parse().map(Some).map_err(|err| {
            Error::Config(format!("{}:{}: field `{key}`: {err} (`{}`)", self.source, e.line, e.value))
        })
    }

    /// Comma-separated list.
    pub fn take_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: std::fmt::Display,
    {
        let Some(e) = self.entries.iter_mut().find(|e| e.key == key) else {
            return Ok(None);
        };
        e.taken = true;
        e.value
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<Vec<V>, _>>()
            .map(Some)
            .map_err(|err| Error::Config(format!("{}:{}: field `{key}`: {err}", self.source, e.line)))
    }

    /// Error naming the file and field.
    pub fn invalid(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        match self.entries.iter().find(|e| e.key == key) {
            Some(e) => Error::Config(format!("{}:{}: field `{key}`: {msg}", self.source, e.line)),
            None => Error::Config(format!("{}: field `{key}`: {msg}", self.source)),
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.iter().find(|e| !e.taken) {
            Some(e) => Err(Error::Config(format!("{}:{}: unknown key `{}`", self.source, e.line, e.key))),
            None => Ok(()),
        }
    }
}
