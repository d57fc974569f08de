//! Single-file checkpoint archive.
//!
//! ```text
//! magic "NESTSEG\0" | u32 version | u64 header length | JSON header
//! | tensor payload (little-endian, dtype from the header) | SHA-256 of all preceding bytes
//! ```

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::{Model, ModelConfig};
use crate::task::TaskSpec;
use crate::train::config::TrainConfig;
use crate::train::optim::{AdamW, OptimizerConfig};
use crate::train::TrainHistory;

pub const MAGIC: &[u8; 8] = b"NESTSEG\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    task: TaskSpec,
    stats: ChannelStats,
    /// Last completed epoch, if any.
    epoch: Option<usize>,
    optimizer: Option<OptimizerState>,
    history: TrainHistory,
    train_config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
}

/// Everything needed to predict with, or resume, a training run.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Float> {
    pub model: Model<T>,
    pub task: TaskSpec,
    pub stats: ChannelStats,
    pub epoch: Option<usize>,
    pub optimizer: Option<AdamW<T>>,
    pub history: TrainHistory,
    pub train_config: Option<TrainConfig>,
}

fn push_values<T: Float>(out: &mut Vec<u8>, a: &ArrayD<T>) {
    for &v in a.iter() {
        match T::DTYPE {
            "f32" => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

fn dtype_width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::CorruptArchive(format!("unknown dtype `{other}`"))),
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint<T: Float>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let params = ck.model.params();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut add = |name: &str, kind: TensorKind, a: &ArrayD<T>| {
        tensors.push(TensorEntry { name: name.to_string(), kind, shape: a.shape().to_vec() });
        push_values(&mut payload, a);
    };
    for p in params.params() {
        add(&p.name, TensorKind::Param, &p.value);
    }
    for b in params.buffers() {
        add(&b.name, TensorKind::Buffer, &b.value);
    }
    if let Some(opt) = &ck.optimizer {
        for (p, (m, v)) in params.params().iter().zip(opt.m.iter().zip(&opt.v)) {
            add(&p.name, TensorKind::AdamM, m);
            add(&p.name, TensorKind::AdamV, v);
        }
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        model: ck.model.config().clone(),
        task: ck.task,
        stats: ck.stats,
        epoch: ck.epoch,
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerState { config: o.config, step: o.step }),
        history: ck.history.clone(),
        train_config: ck.train_config.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let corrupt = |msg: &str| Error::CorruptArchive(msg.to_string());
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;
    if header.dtype != T::DTYPE {
        return Err(Error::Unsupported(format!("checkpoint stores {} values, reader expects {}", header.dtype, T::DTYPE)));
    }
    let width = dtype_width(&header.dtype)?;
    let mut payload = &body[header_end..];
    let mut model = Model::<T>::new(&header.model, 0)?;
    let mut opt = header.optimizer.map(|s| {
        let mut o = AdamW::new(s.config, model.params());
        o.step = s.step;
        o
    });
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let nbytes = count * width;
        if payload.len() < nbytes {
            return Err(corrupt("payload shorter than the tensor table"));
        }
        let (chunk, rest) = payload.split_at(nbytes);
        payload = rest;
        let values: Vec<T> = chunk
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| corrupt(&e.to_string()))?;
        let store = model.params_mut();
        let slot = match entry.kind {
            TensorKind::Buffer => store.buffers_mut().iter_mut().find(|b| b.name == entry.name).map(|b| &mut b.value),
            kind => {
                let id = store.id(&entry.name).ok_or_else(|| corrupt(&format!("unknown tensor {}", entry.name)))?;
                match (kind, opt.as_mut()) {
                    (TensorKind::Param, _) => Some(store.get_mut(id)),
                    (TensorKind::AdamM, Some(o)) => o.m.get_mut(id.index()),
                    (TensorKind::AdamV, Some(o)) => o.v.get_mut(id.index()),
                    _ => None,
                }
            }
        }
        .ok_or_else(|| corrupt(&format!("tensor {} has no slot", entry.name)))?;
        if slot.shape() != array.shape() {
            return Err(corrupt(&format!("tensor {} has shape {:?}, model expects {:?}", entry.name, array.shape(), slot.shape())));
        }
        *slot = array;
    }
    if !payload.is_empty() {
        return Err(corrupt("trailing payload bytes"));
    }
    let expected_params = model.params().len();
    let stored_params = header.tensors.iter().filter(|t| t.kind == TensorKind::Param).count();
    if stored_params != expected_params {
        return Err(corrupt(&format!("{stored_params} parameter tensors stored, model has {expected_params}")));
    }
    Ok(Checkpoint {
        model,
        task: header.task,
        stats: header.stats,
        epoch: header.epoch,
        optimizer: opt,
        history: header.history,
        train_config: header.train_config,
    })
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint<T: Float>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.is_file() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?)
}
