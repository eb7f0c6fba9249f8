//! Binary checkpoints: a JSON header (configs, step, RNG, parameter table)
//! followed by little-endian `f64` parameter values and Adam moments.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SlipError};
use crate::model::{ModelConfig, SlipModel};
use crate::tensor::Matrix;
use crate::trainer::{AdamW, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"SLIPCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// SHA-256 of the serialised model and training configs.
    pub config_hash: String,
    pub step: usize,
    pub rng: Option<ChaCha8Rng>,
    pub adam_t: u64,
    pub has_optimizer: bool,
    pub params: Vec<ParamEntry>,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Matrix>,
    /// Adam first and second moments, present for training checkpoints.
    pub moments: Option<(Vec<Matrix>, Vec<Matrix>)>,
}

pub fn config_hash(model: &ModelConfig, train: Option<&TrainConfig>) -> String {
    let body = serde_json::json!({ "model": model, "train": train });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

fn param_table(model: &SlipModel) -> (Vec<ParamEntry>, Vec<Matrix>) {
    model
        .store
        .iter()
        .map(|(_, p)| {
            (
                ParamEntry {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    trainable: p.trainable,
                },
                p.value.clone(),
            )
        })
        .unzip()
}

impl Checkpoint {
    /// Model weights, training config and optimiser state mid-run.
    pub fn capture(model: &SlipModel, train: &TrainConfig, state: &TrainState) -> Self {
        let (params, values) = param_table(model);
        Self {
            header: CheckpointHeader {
                config_hash: config_hash(&model.config, Some(train)),
                model: model.config.clone(),
                train: Some(train.clone()),
                step: state.step,
                rng: Some(state.rng.clone()),
                adam_t: state.optimizer.t,
                has_optimizer: true,
                params,
            },
            values,
            moments: Some((state.optimizer.m.clone(), state.optimizer.v.clone())),
        }
    }

    /// Weights only.
    pub fn weights(model: &SlipModel) -> Self {
        let (params, values) = param_table(model);
        Self {
            header: CheckpointHeader {
                config_hash: config_hash(&model.config, None),
                model: model.config.clone(),
                train: None,
                step: 0,
                rng: None,
                adam_t: 0,
                has_optimizer: false,
                params,
            },
            values,
            moments: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| SlipError::io(dir, e))?;
            }
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut buf =
            Vec::with_capacity(header.len() + 16 + 8 * self.values.iter().map(Matrix::len).sum::<usize>() * 3);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        let mut put = |ms: &[Matrix]| {
            for m in ms {
                for v in m.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        put(&self.values);
        if let Some((m, v)) = &self.moments {
            put(m);
            put(v);
        }
        // Write to a sibling temp file first so an interrupted save never
        // clobbers the previous checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| SlipError::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| SlipError::io(&tmp, e))?;
        f.sync_all().map_err(|e| SlipError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| SlipError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| SlipError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(SlipError::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(SlipError::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| SlipError::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let expected = config_hash(&header.model, header.train.as_ref());
        if header.config_hash != expected {
            return Err(SlipError::Format(format!(
                "config hash mismatch: stored {}, computed {expected}",
                header.config_hash
            )));
        }
        let scalars: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
        let blocks = if header.has_optimizer { 3 } else { 1 };
        let data = &bytes[20 + hlen..];
        if data.len() != scalars * blocks * 8 {
            return Err(SlipError::Format(format!(
                "checkpoint payload has {} bytes, expected {}",
                data.len(),
                scalars * blocks * 8
            )));
        }
        let mut floats = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = || -> Vec<Matrix> {
            header
                .params
                .iter()
                .map(|p| Matrix::from_vec(p.rows, p.cols, floats.by_ref().take(p.rows * p.cols).collect()))
                .collect()
        };
        let values = take();
        let moments = header.has_optimizer.then(|| (take(), take()));
        Ok(Self {
            header,
            values,
            moments,
        })
    }

    /// Rebuilds the model and writes the stored weights and trainable flags into it.
    pub fn into_model(&self) -> Result<SlipModel> {
        let mut model = SlipModel::new(self.header.model.clone())?;
        if model.store.len() != self.header.params.len() {
            return Err(SlipError::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.header.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for ((id, entry), value) in ids.into_iter().zip(&self.header.params).zip(&self.values) {
            let p = model.store.get(id);
            if p.name != entry.name || p.value.shape() != (entry.rows, entry.cols) {
                return Err(SlipError::Format(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    (entry.rows, entry.cols),
                    p.name,
                    p.value.shape()
                )));
            }
            *model.store.value_mut(id) = value.clone();
            model.store.set_trainable(id, entry.trainable);
        }
        Ok(model)
    }

    /// Optimiser state to resume from, if this is a training checkpoint.
    pub fn train_state(&self) -> Option<TrainState> {
        let (m, v) = self.moments.clone()?;
        Some(TrainState {
            step: self.header.step,
            rng: self.header.rng.clone()?,
            optimizer: AdamW {
                t: self.header.adam_t,
                m,
                v,
            },
        })
    }
}
