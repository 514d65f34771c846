//! The full configuration tree: one structured-text file covering every
//! stage, with desk-scale defaults and validation errors that name the
//! offending key path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use teledrive_core::pipeline::{RolloutConfig, TrainConfig};
use teledrive_core::sim::terrain::TerrainConfig;
use teledrive_core::{Error, Result};

/// Which scripted population a collection run draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    Experienced,
    Inexperienced,
}

impl Population {
    pub fn profiles(self) -> Vec<teledrive_core::drivers::DriverProfile> {
        match self {
            Population::Experienced => teledrive_core::drivers::experienced_population(),
            Population::Inexperienced => teledrive_core::drivers::inexperienced_population(),
        }
    }
}

/// Scripted-driver data collection settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub population: Population,
    pub runs_per_profile: u64,
    pub tick_limit: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            population: Population::Inexperienced,
            runs_per_profile: 2,
            tick_limit: 3000,
        }
    }
}

impl CollectConfig {
    fn validate(&self) -> Result<()> {
        if self.runs_per_profile == 0 {
            return Err(Error::Config("runs_per_profile must be positive".into()));
        }
        if self.tick_limit <= 100 {
            return Err(Error::Config(format!(
                "tick_limit must exceed 100, got {}",
                self.tick_limit
            )));
        }
        Ok(())
    }
}

/// Everything a run can configure, one section per stage. A missing file
/// section falls back to the desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub terrain: TerrainConfig,
    pub collect: CollectConfig,
    pub training: TrainConfig,
    pub rollout: RolloutConfig,
}

/// Re-tag a section's validation error with its key-path prefix.
fn prefixed(section: &str, outcome: Result<()>) -> Result<()> {
    outcome.map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{section}.{msg}")),
        other => other,
    })
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        // Terrain messages already carry their key-path prefix.
        self.terrain.validate()?;
        prefixed("collect", self.collect.validate())?;
        prefixed("training", self.training.validate())?;
        prefixed("rollout", self.rollout.validate())?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Parse a configuration file; absent keys fall back to defaults, unknown
/// keys and out-of-range values are rejected with the key path.
pub fn parse_config(path: &Path) -> Result<AppConfig> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "config file not found: {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let config: AppConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_the_full_default_tree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.toml");
        std::fs::write(&path, "").unwrap();
        let config = parse_config(&path).unwrap();
        assert_eq!(config, AppConfig::default());
        assert_eq!(config.training.epochs, 200);
        assert_eq!(config.collect.runs_per_profile, 2);
        assert_eq!(config.rollout.runs, 28);
    }

    #[test]
    fn default_tree_round_trips() {
        let default = AppConfig::default();
        let text = default.to_toml().unwrap();
        let parsed: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, default);
    }

    #[test]
    fn zero_batch_size_is_rejected_with_the_key_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[training]\nbatch_size = 0\n").unwrap();
        let err = parse_config(&path).unwrap_err();
        assert!(
            err.to_string().contains("training.batch_size"),
            "error should name the key: {err}"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[training]\nbatch_sized = 7\n").unwrap();
        let err = parse_config(&path).unwrap_err();
        assert!(
            err.to_string().contains("batch_sized"),
            "error should name the unknown key: {err}"
        );
    }

    #[test]
    fn missing_file_is_a_clear_error() {
        let err = parse_config(Path::new("/nonexistent/app.toml")).unwrap_err();
        assert!(err.to_string().contains("not found"), "{err}");
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "seed = 9\n[terrain]\nlength = 300.0\n").unwrap();
        let config = parse_config(&path).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.terrain.length, 300.0);
        assert_eq!(config.terrain.width, TerrainConfig::default().width);
        assert_eq!(config.training, TrainConfig::default());
    }
}
