//! The JSON config file and its merge with built-in defaults and flags.
//!
//! Each section is a partial object deep-merged over the defaults of the
//! type it configures and then deserialized strictly, so a misspelt key at
//! any depth is rejected instead of silently ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use convseg_net::GroupId;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Applied to every stochastic component unless `--seed` is given.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Partial engine configuration.
    #[serde(default)]
    pub engine: Map<String, Value>,
    /// Partial model configuration over the tiny preset, or over the full
    /// preset when it contains `"preset": "full"`.
    #[serde(default)]
    pub model: Map<String, Value>,
    /// Partial training configuration.
    #[serde(default)]
    pub train: Map<String, Value>,
    /// Training manifests by data group.
    #[serde(default)]
    pub data: BTreeMap<GroupId, PathBuf>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub threshold: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    #[serde(default)]
    pub port: Option<u16>,
    #[serde(default)]
    pub ui_dir: Option<PathBuf>,
    #[serde(default)]
    pub lease_ms: Option<u64>,
    #[serde(default)]
    pub export: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// everything else is replaced.
pub fn merge(base: &mut Value, patch: &Map<String, Value>) {
    let Value::Object(target) = base else {
        *base = Value::Object(patch.clone());
        return;
    };
    for (k, v) in patch {
        match (target.get_mut(k), v) {
            (Some(existing @ Value::Object(_)), Value::Object(sub)) => merge(existing, sub),
            _ => {
                target.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Deserializes `defaults` with `patch` merged over it.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, patch: &Map<String, Value>, what: &str) -> Result<T, CliError> {
    let mut value = serde_json::to_value(defaults).expect("defaults serialize");
    merge(&mut value, patch);
    from_value(value, what)
}

pub fn from_value<T: DeserializeOwned>(value: Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{what} config: {e}")))
}
