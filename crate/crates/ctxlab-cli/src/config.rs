//! Flat key=value configuration with strict unknown-key rejection.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! `CTXLAB_*` environment variables, then `--set key=value` flags. Every
//! key a command reads is recorded together with the value actually used,
//! which serves two purposes: reports can echo the exact resolved
//! configuration, and any key that was supplied but never read is an error
//! (it is almost always a typo).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use ctxlab::{Error, Result};

pub struct Config {
    /// Merged file + environment + command-line values.
    values: BTreeMap<String, String>,
    /// Keys that have been read, with the value that was used (which is
    /// the default when the key was not supplied).
    resolved: RefCell<BTreeMap<String, String>>,
}

const ENV_PREFIX: &str = "CTXLAB_";

impl Config {
    /// Builds the merged configuration. `file` is optional; `overrides`
    /// are `key=value` strings from the command line.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key = value, got {raw:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for (k, v) in std::env::vars() {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                if !rest.is_empty() {
                    values.insert(rest.to_lowercase(), v);
                }
            }
        }
        for entry in overrides {
            let (k, v) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got {entry:?}"))
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Config { values, resolved: RefCell::new(BTreeMap::new()) })
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    /// Reads a typed value, falling back to `default`.
    pub fn get<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
    {
        match self.values.get(key) {
            Some(raw) => {
                let parsed = raw.parse::<T>().map_err(|_| {
                    Error::Config(format!("bad value for {key}: {raw:?}"))
                })?;
                self.record(key, parsed.to_string());
                Ok(parsed)
            }
            None => {
                self.record(key, default.to_string());
                Ok(default)
            }
        }
    }

    /// Reads a string value.
    pub fn get_str(&self, key: &str, default: &str) -> String {
        let value = self.values.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.record(key, value.clone());
        value
    }

    /// Reads a comma-separated list of typed values.
    pub fn get_list<T>(&self, key: &str, default: &str) -> Result<Vec<T>>
    where
        T: FromStr,
    {
        let raw = self.values.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.record(key, raw.clone());
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|_| Error::Config(format!("bad entry in {key}: {:?}", s.trim())))
            })
            .collect()
    }

    /// Fails if any supplied key was never read by the command — a strict
    /// guard against misspelled configuration.
    pub fn reject_unknown(&self) -> Result<()> {
        let resolved = self.resolved.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !resolved.contains_key(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown configuration key(s): {}",
                unknown.join(", ")
            )))
        }
    }

    /// The resolved configuration (every key read, with the value used),
    /// in sorted order — this is what reports embed.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.resolved.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}
