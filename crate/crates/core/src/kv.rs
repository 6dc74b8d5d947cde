//! Flat `key = value` text files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bit for bit. Lines starting with
//! `#` and blank lines are ignored.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        KvWriter::default()
    }

    pub fn comment(&mut self, text: &str) {
        self.out.push_str("# ");
        self.out.push_str(text);
        self.out.push('\n');
    }

    pub fn str(&mut self, key: &str, value: &str) {
        self.out.push_str(&format!("{key} = {value}\n"));
    }

    pub fn f64(&mut self, key: &str, value: f64) {
        self.str(key, &format_f64(value));
    }

    pub fn opt_f64(&mut self, key: &str, value: Option<f64>) {
        match value {
            Some(v) => self.f64(key, v),
            None => self.str(key, "none"),
        }
    }

    pub fn u64(&mut self, key: &str, value: u64) {
        self.str(key, &value.to_string());
    }

    pub fn bool(&mut self, key: &str, value: bool) {
        self.str(key, if value { "true" } else { "false" });
    }

    pub fn finish(self) -> String {
        self.out
    }
}

pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

/// Parsed key-value file; remembers the line of each key for error messages.
#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(line_no, "empty key"));
            }
            if entries.insert(k.to_string(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::parse(line_no, format!("duplicate key `{k}`")));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::parse(0, format!("missing key `{key}`")))
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map(|(l, _)| *l).unwrap_or(0)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let s = self.str(key)?;
        parse_f64(s).ok_or_else(|| Error::parse(self.line(key), format!("`{key}`: not a number: `{s}`")))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.str(key)? {
            "none" => Ok(None),
            _ => self.f64(key).map(Some),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let s = self.str(key)?;
        s.parse()
            .map_err(|_| Error::parse(self.line(key), format!("`{key}`: not an unsigned integer: `{s}`")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            s => Err(Error::parse(self.line(key), format!("`{key}`: not a boolean: `{s}`"))),
        }
    }

    /// Rejects keys not accepted by `known`.
    pub fn check_keys(&self, known: impl Fn(&str) -> bool) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !known(k) {
                return Err(Error::parse(*line, format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}
