//! Versioned single-file checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u32` header length, a JSON
//! header, then every tensor's values as little-endian `f32` in header
//! order. Serialization is deterministic, so save, load, save reproduces the
//! same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use pathogan_autograd::{Adam, AdamSlot, Scalar};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, PathoGan, Role};
use crate::training::{ReplayBuffer, TrainConfig, TrainState};

pub const MAGIC: &[u8] = b"PATHOGAN-CKPT-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let bad = |m: &str| CheckpointError::Corrupt(format!("rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed is not hex"))?
            .try_into()
            .map_err(|_| bad("seed must be 32 bytes"))?;
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    /// Echo of the full run configuration.
    config: String,
    config_hash: String,
    epoch: usize,
    step: u64,
    rng: RngState,
    adam_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub config_json: String,
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub adam_steps: BTreeMap<String, u64>,
    /// Named tensors in file order.
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState<f32>, config_json: &str, config_hash: &str) -> Self {
        let mut tensors = Vec::new();
        let mut adam_steps = BTreeMap::new();
        for (k, role) in Role::ALL.iter().enumerate() {
            for p in state.model.network(*role).parameters() {
                tensors.push((format!("{}/{}", role.key(), p.name()), p.value().clone()));
            }
            for (name, slot) in state.optimizers[k].slots() {
                let key = format!("{}/{name}", role.key());
                tensors.push((format!("adam/{key}/m"), slot.m.clone()));
                tensors.push((format!("adam/{key}/v"), slot.v.clone()));
                adam_steps.insert(key, slot.step);
            }
        }
        for (label, buf) in [("buffer_A", &state.buffer_a), ("buffer_B", &state.buffer_b)] {
            for (i, img) in buf.stored().iter().enumerate() {
                tensors.push((format!("{label}/{i:04}"), img.clone()));
            }
        }
        Checkpoint {
            model: state.model.config.clone(),
            train: state.config.clone(),
            config_json: config_json.to_string(),
            config_hash: config_hash.to_string(),
            epoch: state.epoch,
            step: state.step,
            rng: RngState::capture(&state.rng),
            adam_steps,
            tensors,
        }
    }

    fn tensor_map(&self) -> BTreeMap<&str, &ArrayD<f32>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    fn load_networks(&self, model: &mut PathoGan<f32>) -> Result<(), CheckpointError> {
        let map = self.tensor_map();
        for role in Role::ALL {
            for p in model.network_mut(role).parameters_mut() {
                let key = format!("{}/{}", role.key(), p.name());
                let t = map
                    .get(key.as_str())
                    .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {key}")))?;
                if t.shape() != p.value().shape() {
                    return Err(CheckpointError::Corrupt(format!(
                        "{key}: shape {:?}, expected {:?}",
                        t.shape(),
                        p.value().shape()
                    )));
                }
                p.set_value((*t).clone());
            }
        }
        Ok(())
    }

    /// Networks only, for inference.
    pub fn into_model(&self) -> Result<PathoGan<f32>, CheckpointError> {
        let mut model = PathoGan::new(self.model.clone(), self.train.seed)?;
        self.load_networks(&mut model)?;
        Ok(model)
    }

    /// Full training state, for resuming.
    pub fn into_state(&self) -> Result<TrainState<f32>, CheckpointError> {
        let model = self.into_model()?;
        let map = self.tensor_map();
        let mut optimizers = Vec::new();
        for role in Role::ALL {
            let mut adam = Adam::new(self.train.adam());
            let prefix = format!("{}/", role.key());
            for (key, &step) in self.adam_steps.range(prefix.clone()..) {
                let Some(name) = key.strip_prefix(&prefix) else { break };
                let get = |part: &str| {
                    map.get(format!("adam/{key}/{part}").as_str())
                        .map(|t| (*t).clone())
                        .ok_or_else(|| CheckpointError::Corrupt(format!("missing optimizer state for {key}")))
                };
                adam.insert_slot(
                    name.to_string(),
                    AdamSlot {
                        step,
                        m: get("m")?,
                        v: get("v")?,
                    },
                );
            }
            optimizers.push(adam);
        }
        let buffer = |label: &str| {
            let stored: Vec<ArrayD<f32>> = self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(label))
                .map(|(_, t)| t.clone())
                .collect();
            if stored.len() > self.train.buffer_capacity {
                return Err(CheckpointError::Corrupt(format!("{label} exceeds its capacity")));
            }
            Ok(ReplayBuffer::from_parts(self.train.buffer_capacity, stored))
        };
        Ok(TrainState {
            config: self.train.clone(),
            model,
            optimizers,
            buffer_a: buffer("buffer_A/")?,
            buffer_b: buffer("buffer_B/")?,
            rng: self.rng.restore()?,
            epoch: self.epoch,
            step: self.step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: f32::DTYPE.to_string(),
            model: self.model.clone(),
            train: self.train.clone(),
            config: self.config_json.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            adam_steps: self.adam_steps.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let data_len: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or(CheckpointError::BadMagic)?;
        if rest.len() < 4 {
            return Err(corrupt("truncated header length"));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let rest = &rest[4..];
        if rest.len() < len {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&rest[..len]).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if header.dtype != f32::DTYPE {
            return Err(CheckpointError::Corrupt(format!("unsupported dtype {}", header.dtype)));
        }
        let mut data = &rest[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 4 {
                return Err(CheckpointError::Corrupt(format!("truncated tensor {}", entry.name)));
            }
            let values: Vec<f32> = data[..n * 4].chunks_exact(4).map(f32::read_le).collect();
            data = &data[n * 4..];
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length matches shape");
            tensors.push((entry.name.clone(), t));
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            config_json: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            adam_steps: header.adam_steps,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        // Write then rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(io(path))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(io(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
