//! `--config` handling: defaults, then the file, then flags.

use std::path::Path;

use home_equiv_core::data::DatasetConfig;
use home_equiv_core::trainer::TrainConfig;
use home_equiv_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Layout of the optional JSON file. Each section holds any subset of the
/// corresponding config's fields.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: Map<String, Value>,
    #[serde(default)]
    pub train: Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        overlay(&DatasetConfig::default(), &self.data, "data")
    }

    pub fn train(&self) -> Result<TrainConfig> {
        overlay(&TrainConfig::default(), &self.train, "train")
    }
}

/// `base` with the keys of `section` replaced; unknown keys are errors.
fn overlay<T: Serialize + DeserializeOwned>(
    base: &T,
    section: &Map<String, Value>,
    name: &str,
) -> Result<T> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    let obj = v.as_object_mut().expect("config is an object");
    for (k, val) in section {
        if !obj.contains_key(k) {
            return Err(Error::BadConfig(format!(
                "unknown key {name}.{k} in config file"
            )));
        }
        obj.insert(k.clone(), val.clone());
    }
    serde_json::from_value(v).map_err(|e| Error::BadConfig(format!("config section {name}: {e}")))
}
