//! `key = value` configuration files. Flags override file values, which
//! override built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
            None => Ok(Settings::default()),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            let key = k.trim().replace('-', "_");
            let value = v.trim().trim_matches('"').to_string();
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            values.insert(key, value);
        }
        Ok(Settings { values })
    }

    /// The flag if given, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}")),
            None => Ok(default),
        }
    }

    pub fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|raw| raw.parse().map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}")))
            .transpose()
    }

    /// Keys present in the file but not in `known`.
    pub fn unknown_keys(&self, known: &[&str]) -> Vec<String> {
        self.values.keys().filter(|k| !known.contains(&k.as_str())).cloned().collect()
    }
}
