//! Run configuration resolved from three layers: command-line flags, then a
//! `key = value` config file, then built-in defaults.
//!
//! Every value a command reads is recorded in its resolved form, so the
//! resolved map alone is enough to rerun the command.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Keys are case-sensitive; `-` and `_` are interchangeable.
pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!("{}:{}: expected `key = value`, found `{line}`", origin.display(), i + 1)));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(CliError::usage(format!("{}:{}: empty key", origin.display(), i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::usage(format!("{}:{}: duplicate key `{key}`", origin.display(), i + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct Settings {
    given: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    /// `flags` take precedence over `file`.
    pub fn new(flags: Vec<(&'static str, Option<String>)>, file: BTreeMap<String, String>) -> Self {
        let mut given = file;
        for (k, v) in flags {
            if let Some(v) = v {
                given.insert(normalize_key(k), v);
            }
        }
        Self {
            given,
            resolved: BTreeMap::new(),
        }
    }

    /// Replays a resolved map verbatim.
    pub fn replay(resolved: BTreeMap<String, String>) -> Self {
        Self {
            given: resolved,
            resolved: BTreeMap::new(),
        }
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        raw.parse()
            .map_err(|e| CliError::usage(format!("invalid value `{raw}` for `{key}`: {e}")))
    }

    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match self.given.get(key) {
            Some(raw) => Self::parse(key, raw)?,
            None => default,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn opt<T>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.given.get(key) {
            Some(raw) => {
                let v: T = Self::parse(key, raw)?;
                self.resolved.insert(key.to_string(), v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn required<T>(&mut self, key: &str) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.opt(key)?
            .ok_or_else(|| CliError::usage(format!("missing required setting `--{}`", key.replace('_', "-"))))
    }

    /// Comma-separated list; `default` uses the same syntax.
    pub fn list<T>(&mut self, key: &str, default: &str) -> Result<Vec<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.given.get(key).cloned().unwrap_or_else(|| default.to_string());
        let items = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Self::parse(key, s))
            .collect::<Result<Vec<T>, _>>()?;
        self.resolved.insert(key.to_string(), raw);
        Ok(items)
    }

    pub fn opt_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        if self.given.contains_key(key) {
            self.list(key, "").map(Some)
        } else {
            Ok(None)
        }
    }

    /// An existing input file, recorded as an absolute path.
    pub fn input(&mut self, key: &str) -> Result<PathBuf, CliError> {
        let raw: String = self.required(key)?;
        self.existing(key, &raw)
    }

    pub fn opt_input(&mut self, key: &str) -> Result<Option<PathBuf>, CliError> {
        match self.opt::<String>(key)? {
            Some(raw) => self.existing(key, &raw).map(Some),
            None => Ok(None),
        }
    }

    fn existing(&mut self, key: &str, raw: &str) -> Result<PathBuf, CliError> {
        let path = std::fs::canonicalize(raw).map_err(|e| CliError::usage(format!("`{key}`: cannot open {raw}: {e}")))?;
        if !path.is_file() {
            return Err(CliError::usage(format!("`{key}`: {raw} is not a file")));
        }
        self.resolved.insert(key.to_string(), path.display().to_string());
        Ok(path)
    }

    /// Fails on settings nothing consumed. Commands call this once they have
    /// read every key and before doing any real work.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: BTreeSet<&String> = self.given.keys().filter(|k| !self.resolved.contains_key(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let names: Vec<&str> = unknown.into_iter().map(String::as_str).collect();
            Err(CliError::usage(format!("unrecognized setting(s) for this command: {}", names.join(", "))))
        }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}
