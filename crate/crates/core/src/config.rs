//! Flat `key = value` configuration files.
//!
//! ```text
//! # applies to every stage
//! batch_size = 4
//! seed = 7
//! # applies only to stage 1a
//! 1a.steps = 2000
//! model.preset = tiny
//! model.unet_channels = 8, 16
//! ```
//!
//! Stage keys are [`StageConfig`] field names, optionally prefixed by a
//! stage name. `model.*` keys are [`ModelConfig`] fields; `model.preset`
//! (`default` or `tiny`) picks the base the other model keys override.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{StageConfig, StageId};

const MODEL_PREFIX: &str = "model.";
const PRESET_KEY: &str = "model.preset";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn has_model_keys(&self) -> bool {
        self.entries.keys().any(|k| k.starts_with(MODEL_PREFIX))
    }

    /// Stage defaults overridden by unprefixed keys, then by keys prefixed
    /// with this stage's name. Keys for other stages are ignored.
    pub fn stage_config(&self, stage: StageId) -> Result<StageConfig> {
        let mut general = BTreeMap::new();
        let mut specific = BTreeMap::new();
        for (k, v) in &self.entries {
            if k.starts_with(MODEL_PREFIX) {
                continue;
            }
            match k.split_once('.') {
                Some((s, field)) => {
                    let target: StageId = s.parse().map_err(|_| Error::Config(format!("unknown key prefix in `{k}`")))?;
                    if target == stage {
                        specific.insert(field.to_string(), v.clone());
                    }
                }
                None => {
                    general.insert(k.clone(), v.clone());
                }
            }
        }
        if general.contains_key("stage") || specific.contains_key("stage") {
            return Err(Error::Config("`stage` is chosen on the command line, not in the config".into()));
        }
        let cfg = overlay(&StageConfig::default_for(stage), &general)?;
        let cfg: StageConfig = overlay(&cfg, &specific)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = match self.get(PRESET_KEY) {
            None | Some("default") => ModelConfig::default(),
            Some("tiny") => ModelConfig::tiny(),
            Some(p) => return Err(Error::Config(format!("unknown model preset `{p}` (expected default or tiny)"))),
        };
        let fields: BTreeMap<String, String> = self
            .entries
            .iter()
            .filter(|(k, _)| k.as_str() != PRESET_KEY)
            .filter_map(|(k, v)| k.strip_prefix(MODEL_PREFIX).map(|f| (f.to_string(), v.clone())))
            .collect();
        let cfg: ModelConfig = overlay(&base, &fields)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Replaces fields of `base` by parsed values, keeping each field's JSON type.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, fields: &BTreeMap<String, String>) -> Result<T> {
    let mut obj = match serde_json::to_value(base)? {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    };
    for (k, raw) in fields {
        let slot = obj.get_mut(k).ok_or_else(|| Error::Config(format!("unknown key `{k}`")))?;
        let text = if slot.is_array() { format!("[{raw}]") } else { raw.clone() };
        let v: Value = serde_json::from_str(&text).map_err(|_| Error::Config(format!("`{k}`: cannot parse `{raw}`")))?;
        let same_kind = match (&*slot, &v) {
            (Value::Number(_), Value::Number(_)) | (Value::Array(_), Value::Array(_)) | (Value::Bool(_), Value::Bool(_)) => true,
            (Value::String(_), Value::String(_)) => true,
            _ => false,
        };
        if !same_kind {
            return Err(Error::Config(format!("`{k}`: `{raw}` has the wrong type")));
        }
        *slot = v;
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Config(e.to_string()))
}

/// Renders `value`'s fields as `prefix.key = value` lines in key order.
pub fn echo_lines<T: Serialize>(prefix: &str, value: &T) -> Result<String> {
    let mut s = String::new();
    if let Value::Object(m) = serde_json::to_value(value)? {
        for (k, v) in m {
            let text = match v {
                Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", "),
                Value::String(t) => t,
                other => other.to_string(),
            };
            if prefix.is_empty() {
                s.push_str(&format!("{k} = {text}\n"));
            } else {
                s.push_str(&format!("{prefix}.{k} = {text}\n"));
            }
        }
    }
    Ok(s)
}
