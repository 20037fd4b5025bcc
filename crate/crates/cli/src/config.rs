//! Run configuration: built-in presets, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::path::Path;

use anyhow::Context;
use clap::ValueEnum;
use pbmorl_core::eql::TrainerConfig;
use pbmorl_core::envs::{EnvConfig, EnvKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Usage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    Scripted,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub capacity: usize,
    /// Seconds a query may stay pending.
    pub expiry_secs: Option<u64>,
    /// Hold each feedback round until its queries are answered or expire.
    pub wait: bool,
    pub wait_timeout_secs: Option<u64>,
    pub reveal_ground_truth: bool,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            capacity: 10_000,
            expiry_secs: None,
            wait: false,
            wait_timeout_secs: None,
            reveal_ground_truth: false,
        }
    }
}

/// What a config file may contain. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    env: Option<String>,
    seed: Option<u64>,
    teacher: Option<TeacherMode>,
    oracle: Option<bool>,
    trainer: Option<toml::Table>,
    environment: Option<toml::Table>,
    service: Option<toml::Table>,
}

/// Fully resolved settings, written to every run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub teacher: TeacherMode,
    /// Train on true rewards instead of a learned reward model.
    pub oracle: bool,
    pub trainer: TrainerConfig,
    pub environment: toml::Table,
    pub service: ServiceSettings,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub env: Option<EnvKind>,
    pub seed: Option<u64>,
    pub teacher: Option<TeacherMode>,
    pub oracle: bool,
    pub steps: Option<usize>,
    pub service: ServiceFlags,
}

#[derive(Clone, Debug, Default)]
pub struct ServiceFlags {
    pub capacity: Option<usize>,
    pub expiry_secs: Option<u64>,
    pub wait: bool,
    pub wait_timeout_secs: Option<u64>,
    pub reveal_ground_truth: bool,
}

fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&toml::Table>, section: &str) -> anyhow::Result<T> {
    let Some(patch) = patch else {
        return Ok(toml::Value::try_from(base)?.try_into()?);
    };
    let mut table = toml::Table::try_from(base)?;
    merge(&mut table, patch);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Usage(format!("[{section}]: {e}")).into())
}

fn env_table(cfg: &EnvConfig) -> anyhow::Result<toml::Table> {
    Ok(toml::from_str(&cfg.to_toml())?)
}

impl RunConfig {
    /// Resolves presets, then `path`, then `over`.
    pub fn resolve(path: Option<&Path>, over: &Overrides) -> anyhow::Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<ConfigFile>(&text).map_err(|e| Usage(format!("config {}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };
        let env = match (over.env, &file.env) {
            (Some(k), _) => k,
            (None, Some(name)) => name.parse::<EnvKind>().map_err(|e| Usage(e.to_string()))?,
            (None, None) => return Err(Usage("no environment given (use --env or set `env` in the config)".into()).into()),
        };
        let mut trainer = overlay(&TrainerConfig::desk(env), file.trainer.as_ref(), "trainer")?;
        if let Some(steps) = over.steps {
            trainer.total_timesteps = steps;
        }
        trainer.validate().map_err(|e| Usage(e.to_string()))?;

        let mut environment = env_table(&EnvConfig::bundled(env))?;
        if let Some(patch) = &file.environment {
            merge(&mut environment, patch);
        }
        let built = EnvConfig::from_toml(env, &toml::to_string(&environment)?).map_err(|e| Usage(format!("[environment]: {e}")))?;
        let environment = env_table(&built)?;

        let mut service: ServiceSettings = overlay(&ServiceSettings::default(), file.service.as_ref(), "service")?;
        let f = &over.service;
        service.capacity = f.capacity.unwrap_or(service.capacity);
        service.expiry_secs = f.expiry_secs.or(service.expiry_secs);
        service.wait_timeout_secs = f.wait_timeout_secs.or(service.wait_timeout_secs);
        service.wait |= f.wait;
        service.reveal_ground_truth |= f.reveal_ground_truth;
        if service.capacity == 0 {
            return Err(Usage("service capacity must be positive".into()).into());
        }

        Ok(RunConfig {
            env,
            seed: over.seed.or(file.seed).unwrap_or(0),
            teacher: over.teacher.or(file.teacher).unwrap_or(TeacherMode::Scripted),
            oracle: over.oracle || file.oracle.unwrap_or(false),
            trainer,
            environment,
            service,
        })
    }

    pub fn env_config(&self) -> anyhow::Result<EnvConfig> {
        Ok(EnvConfig::from_toml(self.env, &toml::to_string(&self.environment)?)?)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }
}
