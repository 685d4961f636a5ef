//! Layered key/value resolution: config file, then `--set` pairs, then named
//! flags. Every named flag mirrors exactly one key.

use std::path::Path;
use std::str::FromStr;

use ays_core::kv::KvMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ays_core::Error> for CliError {
    fn from(e: ays_core::Error) -> Self {
        use ays_core::Error as E;
        match e {
            E::Config { .. } | E::Usage(_) | E::SpecMismatch(_) | E::InvalidParams(_) | E::InvalidState(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// `(flag, key, value)` for one command-line flag.
pub type FlagValue = (&'static str, &'static str, Option<String>);

#[derive(Debug, Clone)]
pub struct Resolved {
    pub kv: KvMap,
    flags: Vec<(&'static str, &'static str)>,
}

impl Resolved {
    pub fn new(config: Option<&Path>, sets: &[String], flags: Vec<FlagValue>) -> CliResult<Self> {
        let mut kv = match config {
            Some(p) => KvMap::load(p).map_err(|e| CliError::Validation(format!("--config: {e}")))?,
            None => KvMap::new(),
        };
        for pair in sets {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("--set: expected KEY=VALUE, got `{pair}`")))?;
            kv.set(k.trim(), v.trim());
        }
        let mut table = Vec::new();
        for (flag, key, value) in flags {
            if let Some(v) = value {
                kv.set(key, v);
            }
            table.push((flag, key));
        }
        Ok(Self { kv, flags: table })
    }

    /// Keys of the base layer not already set.
    pub fn with_base(mut self, base: &KvMap) -> Self {
        let mut merged = base.clone();
        merged.merge(&self.kv);
        self.kv = merged;
        self
    }

    fn label(&self, key: &str) -> String {
        match self.flags.iter().find(|(_, k)| *k == key) {
            Some((flag, _)) => format!("--{flag}"),
            None => format!("`{key}`"),
        }
    }

    /// Rewrites configuration errors to name the flag behind the key.
    pub fn explain(&self, e: ays_core::Error) -> CliError {
        match e {
            ays_core::Error::Config { key, reason } => {
                CliError::Validation(format!("invalid value for {}: {reason}", self.label(&key)))
            }
            other => other.into(),
        }
    }

    pub fn get<T>(&self, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.kv.get_parsed(key).map_err(|e| self.explain(e))?.unwrap_or(default))
    }

    pub fn require(&self, key: &str) -> CliResult<String> {
        self.kv
            .get(key)
            .map(str::to_string)
            .ok_or_else(|| CliError::Validation(format!("{} is required", self.label(key))))
    }

    /// Fails on any key `known` does not accept.
    pub fn reject_unknown(&self, known: impl Fn(&str) -> bool) -> CliResult<()> {
        match self.kv.keys().find(|k| !known(k)) {
            Some(k) => Err(CliError::Validation(format!(
                "{} is not a setting of this command",
                self.label(k)
            ))),
            None => Ok(()),
        }
    }
}
