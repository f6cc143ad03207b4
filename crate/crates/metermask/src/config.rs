//! Flat `key = value` configuration files with `#` comments.
//!
//! Values from a config file sit between built-in defaults and command-line
//! flags: flags override file keys, file keys override defaults. Unknown
//! keys are rejected up front.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?} as {ty}")]
    BadValue {
        key: String,
        value: String,
        ty: &'static str,
    },
}

/// Keys accepted in configuration files.
pub const KNOWN_KEYS: &[&str] = &[
    "batch_size",
    "adversary_steps",
    "noise_dim",
    "beta",
    "lambda",
    "lambdas",
    "iterations",
    "seed",
    "seeds",
    "tau",
    "mode",
    "learning_rate",
    "patience",
    "n_days",
    "jobs",
    "uniform_factors",
    "random_rates",
    "random_repeats",
    "attacker_iterations",
    "scale_cells",
    "samples_per_hour",
];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    map: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            map.insert(key, value.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn get<T: FromStr>(&self, key: &str, ty: &'static str) -> Result<Option<T>, ConfigError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                ty,
            }),
        }
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(
        &self,
        key: &str,
        ty: &'static str,
    ) -> Result<Option<Vec<T>>, ConfigError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim().parse::<T>().map_err(|_| ConfigError::BadValue {
                        key: key.to_string(),
                        value: item.to_string(),
                        ty,
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }
}
