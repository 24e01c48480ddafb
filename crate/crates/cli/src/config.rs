//! Run configuration: a TOML file, then command-line overrides.

use std::fmt;
use std::fs;
use std::path::Path;

use bisal_core::data::DatasetConfig;
use bisal_core::nets::NetConfig;
use bisal_core::pipeline::EvalConfig;
use bisal_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Bad configuration: unreadable file, unknown key, or invalid value.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: bisal_core::Error| ConfigError(e.to_string());
        self.net.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.eval.refine.validate().map_err(wrap)?;
        if self.data.num_points < 3 {
            return Err(ConfigError("data.num_points must be at least 3".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.tau) || !(0.0..=1.0).contains(&self.eval.tau_c) {
            return Err(ConfigError("eval.tau and eval.tau_c must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved_config.toml"), self.to_toml())
    }
}
