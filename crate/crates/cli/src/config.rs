//! Run configuration: built-in defaults, overlaid by a config file, overlaid
//! by flags.
//!
//! The file is TOML with optional sections `[environment]`, `[training]`,
//! `[weights]`, `[dataset]`, `[supervised]` and `[evaluation]`. Each section
//! holds a subset of the fields of the matching settings; unknown keys are
//! rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub environment: toml::Table,
    pub training: toml::Table,
    pub weights: toml::Table,
    pub dataset: toml::Table,
    pub supervised: toml::Table,
    pub evaluation: toml::Table,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
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

/// `base` with the fields present in `patch` replaced.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: &toml::Table, section: &str) -> Result<T, CliError> {
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut table, patch);
    table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::validation(format!("[{section}]: {e}")))
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Random test simulations.
    pub sims: usize,
    /// Objectives per random test simulation.
    pub targets: usize,
    /// `random`, `n-shape` or `hold`; defaults to `hold` for the Hold
    /// environment and `random` otherwise.
    pub schedule: Option<String>,
    pub jobs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sims: 5,
            targets: 4,
            schedule: None,
            jobs: 1,
        }
    }
}
