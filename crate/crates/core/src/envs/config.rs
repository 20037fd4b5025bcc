//! Environment configuration files. Every field has a bundled default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dst::{DeepSeaTreasure, DstConfig};
use super::energy::{EnergyConfig, EnergyStorage};
use super::fruit_tree::{FruitTree, FtConfig};
use super::resource::{ResourceGathering, RgConfig};
use super::{EnvError, EnvKind, Environment};

const DST_DEFAULT: &str = include_str!("../../config/dst.toml");
const FT_DEFAULT: &str = include_str!("../../config/ft.toml");
const RG_DEFAULT: &str = include_str!("../../config/rg.toml");
const ENERGY_DEFAULT: &str = include_str!("../../config/energy.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvConfig {
    Dst(DstConfig),
    Ft(FtConfig),
    Rg(RgConfig),
    Energy(EnergyConfig),
}

impl EnvConfig {
    pub fn bundled(kind: EnvKind) -> Self {
        let text = match kind {
            EnvKind::DeepSeaTreasure => DST_DEFAULT,
            EnvKind::FruitTree => FT_DEFAULT,
            EnvKind::ResourceGathering => RG_DEFAULT,
            EnvKind::Energy => ENERGY_DEFAULT,
        };
        Self::from_toml(kind, text).expect("bundled environment config is valid")
    }

    /// Parses a config file body for `kind`. Unknown keys are rejected.
    pub fn from_toml(kind: EnvKind, text: &str) -> Result<Self, EnvError> {
        fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, EnvError> {
            toml::from_str(text).map_err(|e| EnvError::Config(e.to_string()))
        }
        let cfg = match kind {
            EnvKind::DeepSeaTreasure => EnvConfig::Dst(parse(text)?),
            EnvKind::FruitTree => EnvConfig::Ft(parse(text)?),
            EnvKind::ResourceGathering => EnvConfig::Rg(parse(text)?),
            EnvKind::Energy => EnvConfig::Energy(parse(text)?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(kind: EnvKind, path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(kind, &text)
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Dst(_) => EnvKind::DeepSeaTreasure,
            EnvConfig::Ft(_) => EnvKind::FruitTree,
            EnvConfig::Rg(_) => EnvKind::ResourceGathering,
            EnvConfig::Energy(_) => EnvKind::Energy,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            EnvConfig::Dst(c) => c.validate(),
            EnvConfig::Ft(c) => c.validate(),
            EnvConfig::Rg(c) => c.validate(),
            EnvConfig::Energy(c) => c.validate(),
        }
    }

    /// Renders the config back to TOML (for run snapshots).
    pub fn to_toml(&self) -> String {
        let body = match self {
            EnvConfig::Dst(c) => toml::to_string(c),
            EnvConfig::Ft(c) => toml::to_string(c),
            EnvConfig::Rg(c) => toml::to_string(c),
            EnvConfig::Energy(c) => toml::to_string(c),
        };
        body.expect("environment configs serialize")
    }

    pub fn build(&self, gamma: f64) -> Result<Box<dyn Environment>, EnvError> {
        self.validate()?;
        Ok(match self {
            EnvConfig::Dst(c) => Box::new(DeepSeaTreasure::new(c.clone(), gamma)?),
            EnvConfig::Ft(c) => Box::new(FruitTree::new(c.clone())?),
            EnvConfig::Rg(c) => Box::new(ResourceGathering::new(c.clone())?),
            EnvConfig::Energy(c) => Box::new(EnergyStorage::new(c.clone())?),
        })
    }
}
