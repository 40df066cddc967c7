//! Line-based `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. A key may repeat only where the
//! consumer allows it (backbone `stage` lines).

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn parse_file(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path)?;
    parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Unknown-key error with the closest valid key suggested.
pub fn unknown_key(key: &str, valid: &[&str]) -> Error {
    let norm = |s: &str| s.replace(['_', '-'], "").to_lowercase();
    let best = valid
        .iter()
        .map(|v| {
            let d = if norm(v) == norm(key) { 0 } else { levenshtein(key, v) };
            (d, *v)
        })
        .min();
    let suggestion = match best {
        Some((d, v)) if d <= 3.max(key.len() / 3) => format!(" (did you mean `{v}`?)"),
        _ => String::new(),
    };
    Error::UnknownKey {
        key: key.to_string(),
        suggestion,
        valid: valid.join(", "),
    }
}

pub fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

pub fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}
