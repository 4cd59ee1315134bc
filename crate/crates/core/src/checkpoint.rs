//! Versioned, checksummed model checkpoints.
//!
//! Layout: magic `PVAECKPT`, `u32` version, `u64` header length, a JSON
//! header, the tensor payloads as little-endian `f64` in header order, and a
//! trailing CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ModelConfig, ModelParams, RunningStats};
use crate::tensor::Tensor;
use crate::training::{EpochRecord, OptimizerState, TrainConfig};

const MAGIC: &[u8; 8] = b"PVAECKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Log records kept in a checkpoint.
pub const LOG_TAIL: usize = 100;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Dataset category the model was trained on, if known.
    pub category: Option<String>,
    pub model: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub log_tail: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    category: Option<String>,
    tensors: Vec<TensorEntry>,
    running_stats: Vec<RunningStats>,
    optimizer_step: Option<u64>,
    log_tail: Vec<EpochRecord>,
}

fn entries(names: &[String], tensors: &[Tensor], prefix: &str) -> Vec<TensorEntry> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| TensorEntry { name: format!("{prefix}{n}"), shape: [t.rows(), t.cols()], dtype: "f64".into() })
        .collect()
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.config.model != *ckpt.model.config() {
        return Err(Error::ConfigMismatch("train config and model config differ".into()));
    }
    let store = ckpt.model.store();
    let mut tensors: Vec<&Tensor> = store.tensors().iter().collect();
    let mut list = entries(store.names(), store.tensors(), "");
    if let Some(opt) = &ckpt.optimizer {
        list.extend(entries(store.names(), &opt.m, "adam.m."));
        list.extend(entries(store.names(), &opt.v, "adam.v."));
        tensors.extend(opt.m.iter().chain(&opt.v));
    }
    let start = ckpt.log_tail.len().saturating_sub(LOG_TAIL);
    let header = Header {
        config: ckpt.config.clone(),
        category: ckpt.category.clone(),
        tensors: list,
        running_stats: ckpt.model.running_stats().to_vec(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        log_tail: ckpt.log_tail[start..].to_vec(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Parses checkpoint bytes, verifying magic, checksum and version.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(Error::Checksum);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(Error::Checksum);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;

    let mut model = ModelParams::new(header.config.model.clone())?;
    let n = model.store().len();
    let with_opt = header.optimizer_step.is_some();
    let expected_count = if with_opt { 3 * n } else { n };
    if header.tensors.len() != expected_count {
        return Err(Error::Checkpoint(format!("expected {expected_count} tensors, found {}", header.tensors.len())));
    }

    let mut offset = header_end;
    let mut read = |entry: &TensorEntry, name: &str, shape: (usize, usize)| -> Result<Tensor> {
        if entry.name != name || entry.shape != [shape.0, shape.1] || entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match model tensor `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let len = shape.0 * shape.1 * 8;
        let end = offset + len;
        if end > body.len() {
            return Err(Error::Checkpoint("payload shorter than header".into()));
        }
        let data = body[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        offset = end;
        Tensor::new(shape.0, shape.1, data)
    };

    let names = model.store().names().to_vec();
    let shapes: Vec<(usize, usize)> = model.store().tensors().iter().map(Tensor::shape).collect();
    let mut groups: Vec<Vec<Tensor>> = Vec::new();
    for (g, prefix) in ["", "adam.m.", "adam.v."].iter().enumerate().take(if with_opt { 3 } else { 1 }) {
        let group = (0..n)
            .map(|i| read(&header.tensors[g * n + i], &format!("{prefix}{}", names[i]), shapes[i]))
            .collect::<Result<Vec<_>>>()?;
        groups.push(group);
    }
    if offset != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    let mut groups = groups.into_iter();
    let params = groups.next().expect("parameter group");
    for (slot, t) in model.store_mut().tensors_mut().iter_mut().zip(params) {
        *slot = t;
    }
    model.set_running_stats(header.running_stats)?;
    let optimizer = header.optimizer_step.map(|step| OptimizerState {
        step,
        m: groups.next().expect("first moments"),
        v: groups.next().expect("second moments"),
    });
    Ok(Checkpoint { config: header.config, category: header.category, model, optimizer, log_tail: header.log_tail })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and requires its model configuration to equal `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.model.config();
    if found != expected {
        let detail = if found.parts != expected.parts {
            format!("checkpoint has {} parts, expected {}", found.parts, expected.parts)
        } else {
            "model configuration differs".to_string()
        };
        return Err(Error::ConfigMismatch(detail));
    }
    Ok(ckpt)
}
