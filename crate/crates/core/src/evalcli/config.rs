use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::SynthConfig;
use crate::deploy::NmsConfig;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::trainer::TrainConfig;

/// Everything a CLI run needs, as one TOML document with `[model]`,
/// `[train]` (with `[train.loss]`), `[data]` and `[nms]` tables. Missing
/// keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
    pub nms: NmsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}
