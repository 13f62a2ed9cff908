//! Run configuration: TOML files layered over profile presets, then
//! dotted `KEY=VALUE` overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::credit::CreditConfig;
use crate::envsim::{EnvConfig, Profile};
use crate::error::{Error, Result};
use crate::mosat::MoSatConfig;
use crate::ppo::PpoConfig;

/// Scale preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigProfile {
    /// Small batches and network for a single workstation.
    Desk,
    /// Full-size hyperparameters.
    Paper,
}

impl FromStr for ConfigProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(ConfigProfile::Desk),
            "paper" => Ok(ConfigProfile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for ConfigProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfigProfile::Desk => "desk",
            ConfigProfile::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: usize,
    pub workers: usize,
    pub seed: u64,
    /// Periodic checkpoint interval in iterations; 0 keeps only improvement checkpoints.
    pub checkpoint_every: usize,
    /// Abort when more than this fraction of an iteration's episodes diverge.
    pub max_diverged_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: ConfigProfile,
    pub run: RunConfig,
    pub env: EnvConfig,
    pub net: MoSatConfig,
    pub ppo: PpoConfig,
    pub credit: CreditConfig,
}

impl Config {
    pub fn preset(profile: ConfigProfile, env: Profile) -> Self {
        let paper = Self {
            profile,
            run: RunConfig { iterations: 1000, workers: 4, seed: 0, checkpoint_every: 10, max_diverged_frac: 0.1 },
            env: EnvConfig::for_profile(env),
            net: MoSatConfig::default(),
            ppo: PpoConfig::default(),
            credit: CreditConfig::default(),
        };
        match profile {
            ConfigProfile::Paper => paper,
            ConfigProfile::Desk => Self {
                run: RunConfig { iterations: 80, ..paper.run },
                env: EnvConfig { horizon: DESK_HORIZON, ..paper.env },
                net: MoSatConfig { d_model: 16, heads: 2, policy_blocks: 2, value_blocks: 1, ..paper.net },
                ppo: PpoConfig { batch: 4096, minibatch: 512, epochs: 4, policy_lr: 3e-4, value_lr: 1e-3, ..paper.ppo },
                ..paper
            },
        }
    }

    /// Resolves a configuration: preset, then `file`, then `overrides`.
    /// The scale profile comes from `profile`, else the file, else desk; the
    /// environment profile from the overrides, else the file, else runner.
    pub fn load(file: Option<&Path>, profile: Option<ConfigProfile>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let parsed: Vec<(String, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
        let str_at = |key: &str| -> Option<String> {
            parsed
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .or_else(|| lookup(&file_table, key).cloned())
                .and_then(|v| v.as_str().map(str::to_string))
        };
        let profile = match profile {
            Some(p) => p,
            None => str_at("profile").map(|s| s.parse()).transpose()?.unwrap_or(ConfigProfile::Desk),
        };
        let env = str_at("env.profile").map(|s| s.parse()).transpose()?.unwrap_or(Profile::Runner);
        let mut merged = Value::try_from(Self::preset(profile, env))
            .map_err(|e| Error::Config(format!("preset does not serialize: {e}")))?;
        let Value::Table(base) = &mut merged else { unreachable!("config serializes to a table") };
        merge(base, file_table);
        for (k, v) in parsed {
            set_path(base, &k, v)?;
        }
        base.insert("profile".into(), Value::String(profile.to_string()));
        let cfg: Config = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies dotted `KEY=VALUE` overrides to a resolved configuration.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = Value::try_from(self).map_err(|e| Error::Config(format!("config does not serialize: {e}")))?;
        let Value::Table(t) = &mut v else { unreachable!("config serializes to a table") };
        for o in overrides {
            let (k, val) = parse_override(o)?;
            set_path(t, &k, val)?;
        }
        let cfg: Config = v.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net.validate()?;
        self.ppo.validate()?;
        self.credit.validate()?;
        if self.run.iterations == 0 || self.run.workers == 0 {
            return Err(Error::Config("run.iterations and run.workers must be at least 1".into()));
        }
        if self.run.seed > i64::MAX as u64 {
            return Err(Error::Config("run.seed must fit in a signed 64-bit integer".into()));
        }
        if !(0.0..=1.0).contains(&self.run.max_diverged_frac) {
            return Err(Error::Config("run.max_diverged_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical TOML text of the resolved configuration.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(format!("config snapshot: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// 64-bit FNV-1a digest of the snapshot, as 16 hex digits.
    pub fn hash(&self) -> String {
        let h = self
            .snapshot()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
        format!("{h:016x}")
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::preset(ConfigProfile::Desk, Profile::Runner)
    }
}

/// Control steps per episode in the desk preset.
pub const DESK_HORIZON: usize = 400;

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=VALUE`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))?;
    let key = k.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {s:?} has an empty key segment")));
    }
    let raw = v.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let (head, last) = match key.rsplit_once('.') {
        Some((h, l)) => (Some(h), l),
        None => (None, key),
    };
    let mut cur = table;
    if let Some(h) = head {
        for p in h.split('.') {
            cur = match cur.get_mut(p) {
                Some(Value::Table(t)) => t,
                _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
            };
        }
    }
    match cur.get(last) {
        Some(Value::Table(_)) => Err(Error::Config(format!("{key:?} names a section, not a value"))),
        Some(old) => {
            let value = match (old, value) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            cur.insert(last.to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("unknown configuration key {key:?}"))),
    }
}
