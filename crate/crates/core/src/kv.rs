//! Flat `key = value` text documents.
//!
//! Every on-disk artifact of the crate (mixtures, fields, checkpoints, run
//! configs, manifests) is a sequence of such documents. A line of the form
//! `[name]` starts a new section; `#` starts a comment. Floats are written with
//! Rust's shortest round-trip formatting so a write/read cycle is exact.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::{Error, Result};

/// One section of a key-value document, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    pub header: Option<String>,
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_header(header: impl Into<String>) -> Self {
        Self {
            header: Some(header.into()),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), fmt_f64(value)));
    }

    pub fn push_f64s(&mut self, key: impl Into<String>, values: &[f64]) {
        let joined = values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ");
        self.entries.push((key.into(), joined));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse::<T>()
            .map_err(|_| Error::Parse(format!("bad value for `{key}`: {raw}")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse(key),
        }
    }

    pub fn f64s(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.require(key)?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad float in `{key}`: {tok}")))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.header {
            let _ = writeln!(out, "[{h}]");
        }
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Shortest decimal representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Parses a text into sections. Entries before the first header land in a
/// headerless section, which is dropped when empty.
pub fn parse_sections(text: &str) -> Result<Vec<KvDoc>> {
    let mut docs = vec![KvDoc::new()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse(format!("line {}: unterminated header", lineno + 1)))?;
            docs.push(KvDoc::with_header(name.trim()));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
        docs.last_mut()
            .expect("at least one section")
            .push(k.trim(), v.trim());
    }
    if docs[0].entries.is_empty() {
        docs.remove(0);
    }
    Ok(docs)
}

/// Parses a text holding a single headerless document.
pub fn parse_single(text: &str) -> Result<KvDoc> {
    let mut docs = parse_sections(text)?;
    match docs.len() {
        0 => Ok(KvDoc::new()),
        1 => Ok(docs.remove(0)),
        _ => {
            // sections are flattened in order; later keys win on lookup
            let mut flat = KvDoc::new();
            for d in docs {
                flat.entries.extend(d.entries);
            }
            Ok(flat)
        }
    }
}
