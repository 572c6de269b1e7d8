use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{MhvaeParams, ModelError};
use crate::numerics::Tensor;

use super::{AdamState, EpochMetrics, TrainConfig};

pub const MAGIC: &[u8; 4] = b"MHV1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: magic bytes {found:?}")]
    Magic { found: Vec<u8> },
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: need {expected} bytes, file has {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checkpoint has {0} bytes after the last tensor")]
    TrailingBytes(u64),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor `{name}` has shape {found:?}, the model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Full training state after `epoch` completed epochs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub epoch: usize,
    pub params: MhvaeParams<f32>,
    pub adam: AdamState<f32>,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
}

/// Randomness is fully determined by the seed and the next epoch index.
#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    train: TrainConfig,
    epoch: usize,
    rng: RngState,
    adam_t: u64,
    history: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for p in ck.params.store.iter() {
        out.push((p.name.clone(), &p.value));
    }
    for (i, s) in ck.params.bn_stats.iter().enumerate() {
        out.push((format!("bn.{i}.mean"), &s.mean));
        out.push((format!("bn.{i}.var"), &s.var));
    }
    for (p, (m, v)) in ck.params.store.iter().zip(ck.adam.m.iter().zip(&ck.adam.v)) {
        out.push((format!("adam.m.{}", p.name), m));
        out.push((format!("adam.v.{}", p.name), v));
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let tensors = named_tensors(ck);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = Header {
        train: ck.train.clone(),
        epoch: ck.epoch,
        rng: RngState {
            seed: ck.train.seed,
            next_epoch: ck.epoch,
        },
        adam_t: ck.adam.t,
        history: ck.history.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn need(bytes: &[u8], end: u64) -> Result<(), CheckpointError> {
    if (bytes.len() as u64) < end {
        return Err(CheckpointError::Truncated {
            expected: end,
            found: bytes.len() as u64,
        });
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    need(bytes, 4)?;
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::Magic {
            found: bytes[..4].to_vec(),
        });
    }
    need(bytes, 16)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let start = 16u64
        .checked_add(hlen)
        .ok_or_else(|| CheckpointError::Header("header length overflows".into()))?;
    need(bytes, start)?;
    let header: Header = serde_json::from_slice(&bytes[16..start as usize])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let payload_len: u64 = header
        .tensors
        .iter()
        .map(|e| 4 * e.shape.iter().product::<usize>() as u64)
        .sum();
    need(bytes, start + payload_len)?;
    if bytes.len() as u64 > start + payload_len {
        return Err(CheckpointError::TrailingBytes(bytes.len() as u64 - start - payload_len));
    }
    let payload = &bytes[start as usize..];
    let read = |name: &str, expected: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let e = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if e.shape != expected {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        let n: usize = e.shape.iter().product();
        let lo = e.offset as usize;
        let hi = lo + 4 * n;
        if hi > payload.len() {
            return Err(CheckpointError::Header(format!("tensor `{name}` lies outside the payload")));
        }
        let data = payload[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::new(&e.shape, data).expect("sized"))
    };

    header.train.model.validate()?;
    let mut params = MhvaeParams::<f32>::zeros(&header.train.model)?;
    let mut adam = AdamState::new(&params.store);
    adam.t = header.adam_t;
    let names: Vec<(String, Vec<usize>)> = params
        .store
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (k, (name, shape)) in names.iter().enumerate() {
        let id = params.store.id(name).expect("own name");
        params
            .store
            .set_value(id, read(name, shape)?)
            .map_err(ModelError::from)?;
        adam.m[k] = read(&format!("adam.m.{name}"), shape)?;
        adam.v[k] = read(&format!("adam.v.{name}"), shape)?;
    }
    for (i, s) in params.bn_stats.iter_mut().enumerate() {
        let shape = s.mean.shape().to_vec();
        s.mean = read(&format!("bn.{i}.mean"), &shape)?;
        s.var = read(&format!("bn.{i}.var"), &shape)?;
    }
    Ok(Checkpoint {
        train: header.train,
        epoch: header.epoch,
        params,
        adam,
        history: header.history,
    })
}

/// Writes through a temporary file so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode_checkpoint(ck)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
