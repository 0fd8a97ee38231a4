//! Value resolution: command-line flag, then the `--config` file, then the
//! built-in default. The seed additionally falls back to `DFBENCH_SEED`
//! before defaulting to 0.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

pub const SEED_ENV: &str = "DFBENCH_SEED";

/// Flat key-value settings from a TOML file.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    file: toml::Table,
    env_seed: Option<String>,
}

fn flatten(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items
            .iter()
            .map(|i| flatten(key, i))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => bail!("config key `{key}` must be a plain value or a list"),
    })
}

impl Settings {
    pub fn new(file: toml::Table, env_seed: Option<String>) -> Result<Self> {
        for (k, v) in &file {
            flatten(k, v)?;
        }
        Ok(Settings { file, env_seed })
    }

    /// Reads the optional config file and the seed environment variable.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        Settings::new(file, std::env::var(SEED_ENV).ok())
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => {
                let s = flatten(key, v)?;
                s.parse::<T>()
                    .map(Some)
                    .map_err(|e| anyhow::anyhow!("config key `{key}` = {s:?}: {e}"))
            }
        }
    }

    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        })
    }

    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        Ok(match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        })
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(s) = self.file_value("seed")? {
            return Ok(s);
        }
        match &self.env_seed {
            Some(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an integer")),
            None => Ok(0),
        }
    }
}

/// Comma-separated list such as `4,5,8`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}
