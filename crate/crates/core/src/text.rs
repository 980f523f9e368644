//! Shared pieces of the line-oriented record dialect used by plan, scenario and
//! context files: one record per line, `#` comment lines, whitespace-separated
//! positional fields followed by `key=value` fields.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// One problem found while reading or validating a record file.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Violation {
    /// 1-based source line, when the problem is tied to one.
    pub line: Option<usize>,
    pub message: String,
}

impl Violation {
    pub fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    pub fn general(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every violation found in one file; never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Violations(pub Vec<Violation>);

impl core::fmt::Display for Violations {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl core::error::Error for Violations {}

impl Violations {
    pub(crate) fn check(list: Vec<Violation>) -> Result<(), Violations> {
        if list.is_empty() {
            Ok(())
        } else {
            Err(Violations(list))
        }
    }
}

pub(crate) struct Record<'a> {
    pub line: usize,
    pub keyword: &'a str,
    pub positional: Vec<&'a str>,
    pub named: Vec<(&'a str, &'a str)>,
    /// Everything after the keyword, untouched.
    pub rest: &'a str,
}

pub(crate) fn records(text: &str) -> impl Iterator<Item = Record<'_>> {
    text.lines().enumerate().filter_map(|(idx, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let (keyword, rest) = match line.find(char::is_whitespace) {
            Some(pos) => (&line[..pos], line[pos..].trim_start()),
            None => (line, ""),
        };
        let mut positional = Vec::new();
        let mut named = Vec::new();
        for tok in rest.split_whitespace() {
            match tok.split_once('=') {
                Some((k, v)) => named.push((k, v)),
                None => positional.push(tok),
            }
        }
        Some(Record { line: idx + 1, keyword, positional, named, rest })
    })
}

impl Record<'_> {
    pub fn number_at(&self, idx: usize, what: &str) -> Result<f64, String> {
        let tok = self.positional.get(idx).ok_or_else(|| format!("missing {what}"))?;
        parse_number(tok).map_err(|e| format!("{what}: {e}"))
    }

    pub fn named_number(&self, key: &str) -> Result<f64, String> {
        let mut found = self.named.iter().filter(|(k, _)| *k == key);
        let (_, v) = found.next().ok_or_else(|| format!("missing {key}="))?;
        if found.next().is_some() {
            return Err(format!("{key}= given more than once"));
        }
        parse_number(v).map_err(|e| format!("{key}: {e}"))
    }

    /// Rejects positional/named fields beyond what the record kind allows.
    pub fn expect_shape(&self, positional: usize, keys: &[&str]) -> Result<(), String> {
        if self.positional.len() != positional {
            return Err(format!(
                "`{}` expects {} positional field(s), found {}",
                self.keyword,
                positional,
                self.positional.len()
            ));
        }
        for (k, _) in &self.named {
            if !keys.contains(k) {
                return Err(format!("unknown field `{k}` for `{}`", self.keyword));
            }
        }
        Ok(())
    }
}

/// Plain decimal number: optional sign, digits, optional fraction and exponent.
/// `inf`, `nan` and hex forms are rejected.
pub(crate) fn parse_number(tok: &str) -> Result<f64, String> {
    let body = tok.strip_prefix(['+', '-']).unwrap_or(tok);
    let valid = !body.is_empty()
        && body.starts_with(|c: char| c.is_ascii_digit() || c == '.')
        && body.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'));
    if !valid {
        return Err(format!("`{tok}` is not a decimal number"));
    }
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("`{tok}` is not a decimal number")),
    }
}

/// Shortest decimal form that parses back to the same `f64`.
pub(crate) fn fmt_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v}")
}
