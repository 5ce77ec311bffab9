//! Run configuration: a TOML file with one table per module, plus
//! `key=value` overrides on dotted keys.

use std::path::Path;

use pathogan::data::{AugmentationConfig, DomainCounts};
use pathogan::losses::LossWeights;
use pathogan::model::{ArchConfig, ModelConfig};
use pathogan::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountsSection {
    pub healthy: usize,
    pub pathological: usize,
}

impl Default for CountsSection {
    fn default() -> Self {
        CountsSection {
            healthy: 1500,
            pathological: 6000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset manifest (file or directory); empty means "not set".
    pub manifest: String,
    pub slice_lo: usize,
    /// Inclusive.
    pub slice_hi: usize,
    pub pathology_threshold: usize,
    pub counts: CountsSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: String::new(),
            slice_lo: 60,
            slice_hi: 100,
            pathology_threshold: 20,
            counts: CountsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_channels: usize,
    pub image_size: usize,
    pub z: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            n_channels: m.n_channels,
            image_size: m.image_size,
            z: m.z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            step_size: t.step_size,
            beta1: t.momentum_pair.0,
            beta2: t.momentum_pair.1,
            buffer_capacity: t.buffer_capacity,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            augment: t.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold: 0.5,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub weights: LossWeights,
    pub augment: AugmentationConfig,
    pub eval: EvalSection,
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| ConfigError::Override(key.to_string()))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parse TOML text, apply overrides, reject unknown keys and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = ConfigError::Invalid;
        if self.data.slice_lo > self.data.slice_hi {
            return Err(bad(format!(
                "data.slice_lo ({}) exceeds data.slice_hi ({})",
                self.data.slice_lo, self.data.slice_hi
            )));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(bad("eval.threshold must lie in (0, 1)".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(bad("eval.batch_size must be positive".into()));
        }
        self.augment.validate().map_err(bad)?;
        self.train_config().validate().map_err(|e| bad(e.to_string()))?;
        self.model_config().check_shapes().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_channels: self.model.n_channels,
            image_size: self.model.image_size,
            z: self.model.z,
            arch: self.arch.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            weights: self.weights,
            step_size: t.step_size,
            momentum_pair: (t.beta1, t.beta2),
            buffer_capacity: t.buffer_capacity,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            augment: t.augment,
        }
    }

    pub fn counts(&self) -> DomainCounts {
        DomainCounts {
            healthy: self.data.counts.healthy,
            pathological: self.data.counts.pathological,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    /// Key-sorted compact JSON; the basis of the hash.
    pub fn canonical_json(&self) -> String {
        // serde_json's default map is ordered, so round-tripping through
        // `Value` sorts every object's keys.
        let value = serde_json::to_value(self).expect("serializable config");
        serde_json::to_string(&value).expect("serializable value")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Every dotted key with its default value.
    pub fn keys() -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
            match v {
                toml::Value::Table(t) => {
                    for (k, v) in t {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, v, out);
                    }
                }
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let value = toml::Value::try_from(RunConfig::default()).expect("serializable config");
        let mut out = Vec::new();
        walk("", &value, &mut out);
        out
    }

    pub fn keys_help() -> String {
        let mut out = String::from("Configuration keys (defaults):\n");
        for (k, v) in Self::keys() {
            out.push_str(&format!("  {k} = {v}\n"));
        }
        out
    }
}
