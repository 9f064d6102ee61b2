//! JSON run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::DcfParams;
use crate::net::NetworkConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use crate::verify::LAYER_TOLERANCE;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dcf: DcfParams,
    #[serde(default = "default_tolerance")]
    pub gradcheck_tolerance: f64,
}

fn default_tolerance() -> f64 {
    LAYER_TOLERANCE
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            synth: SynthConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            dcf: DcfParams::default(),
            gradcheck_tolerance: LAYER_TOLERANCE,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Invalid(format!(
                "unsupported version {}, expected {CONFIG_VERSION}",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NormVariant;

    #[test]
    fn minimal_document_uses_defaults() {
        let c = RunConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.network.norm_variant = NormVariant::Wrfn;
        c.train.epochs = 3;
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.train_config().seed, 42);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        assert!(RunConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 1, "extra": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 1, "train": {"epochz": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 1, "network": {"norm_variant": "batch"}}"#).is_err());
    }
}
