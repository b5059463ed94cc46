//! Plain-text `key = value` configuration.
//!
//! `#` starts a comment, lists are comma-separated, and every key must be
//! consumed by some reader: [`KvConfig::finish`] rejects leftovers so typos
//! surface as errors instead of silently falling back to defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, found `{line}`"),
                ));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}", lineno + 1), "empty key"));
            }
            if cfg
                .values
                .insert(key.to_owned(), v.trim().to_owned())
                .is_some()
            {
                return Err(Error::config(key, "specified more than once"));
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Insert or replace a value (command-line overrides).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_owned(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.consumed.insert(key.to_owned());
        }
        v
    }

    fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
    where
        T::Err: Display,
    {
        v.parse::<T>()
            .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
    }

    /// Typed value or `default`; the effective value is recorded.
    pub fn get_or<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match self.raw(key) {
            Some(v) => Self::parse_value(key, &v)?,
            None => default,
        };
        self.resolved.insert(key.to_owned(), v.to_string());
        Ok(v)
    }

    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            Some(v) if v.eq_ignore_ascii_case("none") || v.is_empty() => {
                self.resolved.insert(key.to_owned(), "none".into());
                Ok(None)
            }
            Some(v) => {
                let t: T = Self::parse_value(key, &v)?;
                self.resolved.insert(key.to_owned(), t.to_string());
                Ok(Some(t))
            }
            None => Ok(None),
        }
    }

    pub fn get_list_or<T: FromStr + Display>(
        &mut self,
        key: &str,
        default: Vec<T>,
    ) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let v = match self.raw(key) {
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Self::parse_value(key, s))
                .collect::<Result<Vec<T>>>()?,
            None => default,
        };
        let shown: Vec<String> = v.iter().map(ToString::to_string).collect();
        self.resolved.insert(key.to_owned(), shown.join(", "));
        Ok(v)
    }

    /// `a:b, c:d` pairs.
    pub fn get_pairs_or<A, B>(&mut self, key: &str, default: Vec<(A, B)>) -> Result<Vec<(A, B)>>
    where
        A: FromStr + Display,
        B: FromStr + Display,
        A::Err: Display,
        B::Err: Display,
    {
        let v = match self.raw(key) {
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|item| {
                    let (a, b) = item.split_once(':').ok_or_else(|| {
                        Error::config(key, format!("expected `a:b`, found `{item}`"))
                    })?;
                    Ok((
                        Self::parse_value(key, a.trim())?,
                        Self::parse_value(key, b.trim())?,
                    ))
                })
                .collect::<Result<Vec<(A, B)>>>()?,
            None => default,
        };
        let shown: Vec<String> = v.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        self.resolved.insert(key.to_owned(), shown.join(", "));
        Ok(v)
    }

    /// Error on any key that no reader consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .map(String::as_str)
            .collect();
        match unknown.first() {
            None => Ok(()),
            Some(first) => Err(Error::config(
                *first,
                format!("unknown key (unrecognized: {})", unknown.join(", ")),
            )),
        }
    }

    /// Every effective setting, in the same `key = value` syntax.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}
