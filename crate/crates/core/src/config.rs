//! Top-level run configuration: one JSON document with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::FusionConfig;
use crate::losses::LossConfig;
use crate::pipeline::TrainConfig;
use crate::synthgen::SynthConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.encoder.text_dim == 0 || self.encoder.text_max_len < 6 + self.train.context_tokens {
            return Err(Error::Config(format!(
                "text_max_len {} cannot hold a part prompt with {} context tokens",
                self.encoder.text_max_len, self.train.context_tokens
            )));
        }
        Ok(())
    }

    /// Applies `section.field=value` style overrides; values parse as JSON
    /// and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (path, raw) in overrides {
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut node = &mut doc;
            let keys: Vec<&str> = path.split('.').collect();
            for (i, key) in keys.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("`{path}` does not name a config field")))?;
                if !obj.contains_key(*key) {
                    return Err(Error::Config(format!("unknown config field `{path}`")));
                }
                if i + 1 == keys.len() {
                    obj.insert(key.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*key).expect("checked above");
            }
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// sha256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}
