//! Flat `section.key = value` configuration files.
//!
//! ```text
//! # comment
//! physics.friction = 0.1
//! sweep.k = log(1e-3, 1e2, 16)
//! data.domain = 0:6.283185307179586
//! ```
//!
//! Values are read through typed getters that record what was resolved
//! (including defaults), so the effective configuration can be echoed into
//! the run manifest. Keys that no driver reads are rejected by [`Config::finish`].

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::stats::{lin_space, log_space};

#[derive(Debug, Clone)]
pub struct Config {
    source: String,
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                file: source.to_string(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `section.key = value`, got `{line}`")))?;
            let key = key.trim();
            let well_formed = key.split('.').count() >= 2
                && key.split('.').all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
            if !well_formed {
                return Err(parse_err(format!("malformed key `{key}`")));
            }
            if entries.insert(key.to_string(), (value.trim().to_string(), i + 1)).is_some() {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
            used: RefCell::default(),
            resolved: RefCell::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Overrides or inserts a value, as for command-line flags.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    fn error(&self, key: &str, message: impl Into<String>) -> Error {
        let message = message.into();
        match self.entries.get(key) {
            Some((_, line)) if *line > 0 => Error::config(key, format!("{message} ({}:{line})", self.source)),
            _ => Error::config(key, message),
        }
    }

    fn parse_value<T: FromStr>(&self, key: &str, text: &str) -> Result<T> {
        text.trim()
            .parse()
            .map_err(|_| self.error(key, format!("cannot parse `{}` as {}", text.trim(), short_type_name::<T>())))
    }

    pub fn get<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T> {
        let value = match self.raw(key) {
            Some(text) => self.parse_value(key, text)?,
            None => default,
        };
        self.record(key, value.to_string());
        Ok(value)
    }

    pub fn require<T: FromStr + Display>(&self, key: &str) -> Result<T> {
        let text = self.raw(key).ok_or_else(|| self.error(key, "missing required key"))?;
        let value: T = self.parse_value(key, text)?;
        self.record(key, value.to_string());
        Ok(value)
    }

    pub fn get_opt<T: FromStr + Display>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            Some(text) => {
                let value: T = self.parse_value(key, text)?;
                self.record(key, value.to_string());
                Ok(Some(value))
            }
            None => Ok(None),
        }
    }

    pub fn get_positive(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.get(key, default)?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(self.error(key, format!("must be positive, got {v}")));
        }
        Ok(v)
    }

    pub fn get_non_negative(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.get(key, default)?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(self.error(key, format!("must be non-negative, got {v}")));
        }
        Ok(v)
    }

    pub fn get_count(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.get(key, default)?;
        if v == 0 {
            return Err(self.error(key, "must be at least 1"));
        }
        Ok(v)
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr + Display>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
    {
        let values = match self.raw(key) {
            Some(text) => text
                .split(',')
                .map(|s| self.parse_value(key, s))
                .collect::<Result<Vec<T>>>()?,
            None => default.to_vec(),
        };
        if values.is_empty() {
            return Err(self.error(key, "list is empty"));
        }
        self.record(key, join(&values));
        Ok(values)
    }

    /// A sweep axis: `log(lo, hi, n)`, `lin(lo, hi, n)` or an explicit list.
    pub fn get_axis(&self, key: &str, default: Axis) -> Result<Vec<f64>> {
        let axis = match self.raw(key) {
            Some(text) => Axis::parse(text).map_err(|m| self.error(key, m))?,
            None => default,
        };
        let values = axis.values().map_err(|m| self.error(key, m))?;
        self.record(key, axis.to_string());
        Ok(values)
    }

    /// Pairs written `a:b, a:b`.
    pub fn get_pairs(&self, key: &str, default: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        let values = match self.raw(key) {
            Some(text) => text
                .split(',')
                .map(|part| {
                    let (a, b) = part
                        .split_once(':')
                        .ok_or_else(|| self.error(key, format!("expected `a:b`, got `{}`", part.trim())))?;
                    Ok((self.parse_value::<f64>(key, a)?, self.parse_value::<f64>(key, b)?))
                })
                .collect::<Result<Vec<_>>>()?,
            None => default.to_vec(),
        };
        if values.is_empty() {
            return Err(self.error(key, "list is empty"));
        }
        let text: Vec<String> = values.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        self.record(key, text.join(", "));
        Ok(values)
    }

    /// Per-axis intervals written `lo:hi, lo:hi`.
    pub fn get_intervals(&self, key: &str, default: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        let values = self.get_pairs(key, default)?;
        if values.iter().any(|(a, b)| !(a < b)) {
            return Err(self.error(key, "intervals need lo < hi"));
        }
        Ok(values)
    }

    /// Fails on keys that were never read, which are almost always typos.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(key) => Err(self.error(key, "unknown key")),
            None => Ok(()),
        }
    }

    /// The effective configuration, one `key = value` per line, sorted.
    pub fn echo(&self) -> String {
        self.resolved.borrow().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn short_type_name<T>() -> &'static str {
    let name = std::any::type_name::<T>();
    name.rsplit("::").next().unwrap_or(name)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    Log { lo: f64, hi: f64, n: usize },
    Lin { lo: f64, hi: f64, n: usize },
    List(Vec<f64>),
}

impl Axis {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        let text = text.trim();
        for (prefix, log) in [("log(", true), ("lin(", false)] {
            if let Some(rest) = text.strip_prefix(prefix) {
                let inner = rest.strip_suffix(')').ok_or("missing `)`")?;
                let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(format!("expected {prefix}lo, hi, n)"));
                }
                let lo: f64 = parts[0].parse().map_err(|_| format!("bad number `{}`", parts[0]))?;
                let hi: f64 = parts[1].parse().map_err(|_| format!("bad number `{}`", parts[1]))?;
                let n: usize = parts[2].parse().map_err(|_| format!("bad count `{}`", parts[2]))?;
                return Ok(if log { Axis::Log { lo, hi, n } } else { Axis::Lin { lo, hi, n } });
            }
        }
        text.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad number `{}`", s.trim())))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Axis::List)
    }

    fn values(&self) -> std::result::Result<Vec<f64>, String> {
        let values = match *self {
            Axis::Log { lo, hi, n } => {
                if !(lo > 0.0 && hi >= lo) || n == 0 {
                    return Err("log axis needs 0 < lo <= hi and n >= 1".into());
                }
                log_space(lo, hi, n)
            }
            Axis::Lin { lo, hi, n } => {
                if !(hi >= lo) || n == 0 {
                    return Err("linear axis needs lo <= hi and n >= 1".into());
                }
                lin_space(lo, hi, n)
            }
            Axis::List(ref v) => v.clone(),
        };
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err("axis must hold finite values".into());
        }
        Ok(values)
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Log { lo, hi, n } => write!(f, "log({lo}, {hi}, {n})"),
            Axis::Lin { lo, hi, n } => write!(f, "lin({lo}, {hi}, {n})"),
            Axis::List(v) => f.write_str(&join(v)),
        }
    }
}
