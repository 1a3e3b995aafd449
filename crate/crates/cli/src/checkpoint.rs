//! Versioned checkpoint container.
//!
//! Layout: `RBNTCKPT`, u32 format version, u64 header length, JSON header,
//! then little-endian tensor payload. The header lists every tensor blob by
//! group and name and carries a SHA-256 of the payload.

use std::path::Path;

use robustnet_core::arch::NetworkSpec;
use robustnet_core::training::{Checkpoint, EpochMetrics, NamedTensor, TrainRecipe};
use robustnet_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::fsutil::{read, sha256_hex, write_atomic};

pub const MAGIC: &[u8; 8] = b"RBNTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    Momentum,
    EmaParam,
    EmaBuffer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config_hash: Option<String>,
    spec: NetworkSpec,
    recipe: TrainRecipe,
    seed: u64,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
    has_ema: bool,
    tensors: Vec<Entry>,
    payload_sha256: String,
}

fn dtype_of<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Serializes `ckpt`; `config_hash` ties the file to its experiment.
pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let dtype = dtype_of::<T>();
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut push = |group: Group, name: &str, t: &Tensor<T>, payload: &mut Vec<u8>| {
        entries.push(Entry { group, name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.numel();
        for &v in t.data() {
            if dtype == "f32" {
                payload.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            } else {
                payload.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
    };
    for p in &ckpt.params {
        push(Group::Param, &p.name, &p.value, &mut payload);
    }
    for b in &ckpt.buffers {
        push(Group::Buffer, &b.name, &b.value, &mut payload);
    }
    for (m, p) in ckpt.momentum.iter().zip(&ckpt.params) {
        if let Some(m) = m {
            push(Group::Momentum, &p.name, m, &mut payload);
        }
    }
    if let (Some(ep), Some(eb)) = (&ckpt.ema_params, &ckpt.ema_buffers) {
        for (t, p) in ep.iter().zip(&ckpt.params) {
            push(Group::EmaParam, &p.name, t, &mut payload);
        }
        for (t, b) in eb.iter().zip(&ckpt.buffers) {
            push(Group::EmaBuffer, &b.name, t, &mut payload);
        }
    }
    let header = Header {
        dtype: dtype.to_string(),
        config_hash: config_hash.map(str::to_string),
        spec: ckpt.spec.clone(),
        recipe: ckpt.recipe.clone(),
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        metrics: ckpt.metrics.clone(),
        has_ema: ckpt.ema_params.is_some(),
        tensors: entries,
        payload_sha256: sha256_hex(&payload),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + h.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decoded checkpoint and the config hash stored with it.
pub struct LoadedCheckpoint<T> {
    pub checkpoint: Checkpoint<T>,
    pub config_hash: Option<String>,
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<LoadedCheckpoint<T>> {
    let bad = |offset: usize, detail: String| IoError::Integrity { path: path.to_path_buf(), offset: offset as u64, detail };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(0, String::from("not a checkpoint file")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(8, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad(12, String::from("header runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(20, format!("header: {e}")))?;
    let payload = &bytes[hend..];
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(20, format!("unknown dtype {other}"))),
    };
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * width {
        return Err(bad(hend + payload.len().min(total * width), format!("payload has {} bytes, header describes {}", payload.len(), total * width)));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(bad(hend, String::from("payload checksum mismatch")));
    }
    let tensor = |e: &Entry| -> Result<Tensor<T>> {
        let n: usize = e.shape.iter().product();
        if e.offset + n > total {
            return Err(bad(20, format!("tensor {} lies outside the payload", e.name)));
        }
        let raw = &payload[e.offset * width..(e.offset + n) * width];
        let data = raw
            .chunks_exact(width)
            .map(|c| if width == 4 { T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64) } else { T::c(f64::from_le_bytes(c.try_into().unwrap())) })
            .collect();
        Ok(Tensor::from_vec(&e.shape, data)?)
    };
    let group = |g: Group| header.tensors.iter().filter(move |e| e.group == g);
    let named = |g: Group| -> Result<Vec<NamedTensor<T>>> { group(g).map(|e| Ok(NamedTensor { name: e.name.clone(), value: tensor(e)? })).collect() };
    let params = named(Group::Param)?;
    let buffers = named(Group::Buffer)?;
    let momentum = params
        .iter()
        .map(|p| group(Group::Momentum).find(|e| e.name == p.name).map(tensor).transpose())
        .collect::<Result<Vec<_>>>()?;
    let (ema_params, ema_buffers) = if header.has_ema {
        let ep: Vec<Tensor<T>> = group(Group::EmaParam).map(tensor).collect::<Result<_>>()?;
        let eb: Vec<Tensor<T>> = group(Group::EmaBuffer).map(tensor).collect::<Result<_>>()?;
        (Some(ep), Some(eb))
    } else {
        (None, None)
    };
    Ok(LoadedCheckpoint {
        checkpoint: Checkpoint {
            spec: header.spec,
            recipe: header.recipe,
            seed: header.seed,
            epoch: header.epoch,
            params,
            buffers,
            momentum,
            ema_params,
            ema_buffers,
            metrics: header.metrics,
        },
        config_hash: header.config_hash,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>, config_hash: Option<&str>) -> Result<()> {
    write_atomic(path, &encode(ckpt, config_hash)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    decode(&read(path)?, path)
}
