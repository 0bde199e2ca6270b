//! Single-file checkpoints.
//!
//! Layout: an 8-byte little-endian manifest length, a JSON manifest with
//! the model config and a table of tensors, then the tensors as raw
//! little-endian `f32` values in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{OptimizerState, TrainerState};

const FORMAT: &str = "gaformer-checkpoint";
const VERSION: u32 = 1;
const OPT_M: &str = "optimizer.m/";
const OPT_V: &str = "optimizer.v/";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob section, in `f32` elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainingEntry {
    step: u64,
    best_val_loss: Option<f64>,
    evals_since_best: usize,
    optimizer_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    training: Option<TrainingEntry>,
}

/// Model weights plus, for resumable checkpoints, the optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub trainer: Option<TrainerState>,
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(model: &Model<f32>, trainer: Option<&TrainerState>) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, &[usize], &[f32])> = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.shape(), p.value()))
        .collect();
    let training = match trainer {
        None => None,
        Some(t) => {
            if t.optimizer.m.len() != model.store.len() || t.optimizer.v.len() != model.store.len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            for ((_, p), (m, v)) in model.store.iter().zip(t.optimizer.m.iter().zip(&t.optimizer.v)) {
                entries.push((format!("{OPT_M}{}", p.name), p.shape(), m));
                entries.push((format!("{OPT_V}{}", p.name), p.shape(), v));
            }
            Some(TrainingEntry {
                step: t.step,
                best_val_loss: t.best_val_loss,
                evals_since_best: t.evals_since_best,
                optimizer_step: t.optimizer.t,
            })
        }
    };
    let mut offset = 0;
    let tensors = entries
        .iter()
        .map(|(name, shape, data)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: shape.to_vec(),
                offset,
            };
            offset += data.len();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        tensors,
        training,
    })?;
    let mut out = Vec::with_capacity(8 + manifest.len() + offset * 4);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, _, blob) in &entries {
        for x in blob.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("file is too short".into()))?;
    let len = u64::from_le_bytes(header) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = &bytes[8 + len..];
    if !blob.len().is_multiple_of(4) {
        return Err(bad("tensor section is not a whole number of floats".into()));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = Model::<f32>::new(manifest.config.clone(), 0)?;
    let n = model.store.len();
    let mut m = vec![None; n];
    let mut v = vec![None; n];
    let mut loaded = vec![false; n];
    for entry in &manifest.tensors {
        let size: usize = entry.shape.iter().product();
        let data = floats
            .get(entry.offset..entry.offset + size)
            .ok_or_else(|| bad(format!("tensor {} runs past the end of the file", entry.name)))?;
        let (slot, name) = if let Some(rest) = entry.name.strip_prefix(OPT_M) {
            (1, rest)
        } else if let Some(rest) = entry.name.strip_prefix(OPT_V) {
            (2, rest)
        } else {
            (0, entry.name.as_str())
        };
        let id = model
            .store
            .id(name)
            .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        let expected = model.store.get(id).shape().to_vec();
        if expected != entry.shape {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, config expects {expected:?}",
                entry.shape
            )));
        }
        match slot {
            0 => {
                model.store.set(id, Tensor::new(&expected, data.to_vec())?)?;
                loaded[id.index()] = true;
            }
            1 => m[id.index()] = Some(data.to_vec()),
            _ => v[id.index()] = Some(data.to_vec()),
        }
    }
    if let Some(i) = loaded.iter().position(|&l| !l) {
        let name = &model.store.iter().nth(i).unwrap().1.name;
        return Err(bad(format!("missing tensor {name}")));
    }
    let trainer = match manifest.training {
        None => None,
        Some(t) => {
            let collect = |xs: Vec<Option<Vec<f32>>>, what: &str| {
                xs.into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad(format!("incomplete optimizer {what} state")))
            };
            Some(TrainerState {
                step: t.step,
                best_val_loss: t.best_val_loss,
                evals_since_best: t.evals_since_best,
                optimizer: OptimizerState {
                    m: collect(m, "first moment")?,
                    v: collect(v, "second moment")?,
                    t: t.optimizer_step,
                },
            })
        }
    };
    Ok(Checkpoint { model, trainer })
}

pub fn save(path: &Path, model: &Model<f32>, trainer: Option<&TrainerState>) -> Result<()> {
    let bytes = to_bytes(model, trainer)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of a checkpoint file.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
