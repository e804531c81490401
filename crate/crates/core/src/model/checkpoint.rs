//! Checkpoint container.
//!
//! ```text
//! b"EGMCKPT1" | u32 header_len | header JSON
//!   | for each tensor in declared order: f64 LE x len
//!   | SHA-256 of every preceding byte (32 bytes)
//! ```
//! The header JSON holds the model config, free-form metadata and the
//! `(name, len)` list of tensors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ModelState, Result, Weights};

const MAGIC: &[u8; 8] = b"EGMCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    /// Run metadata, e.g. quantization levels and segment length.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<(String, usize)>,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let tensors = ckpt.state.weights.tensors();
    let header = Header {
        model: ckpt.state.config.clone(),
        meta: ckpt.meta.clone(),
        tensors: tensors.iter().map(|(n, t)| (n.clone(), t.len())).collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(json.len() + 44 + 8 * ckpt.state.weights.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 44 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let json_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let json = body.get(12..12 + json_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    header.model.validate()?;
    let mut weights = Weights::zeros(&header.model);
    {
        let names: Vec<(String, usize)> = weights.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
        if names != header.tensors {
            return Err(bad("tensor list does not match the configured model"));
        }
    }
    let mut blob = &body[12 + json_len..];
    for t in weights.tensors_mut() {
        let n = 8 * t.len();
        if blob.len() < n {
            return Err(bad("truncated parameters"));
        }
        for (v, b) in t.iter_mut().zip(blob[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        blob = &blob[n..];
    }
    if !blob.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        state: ModelState {
            config: header.model,
            weights,
        },
        meta: header.meta,
    })
}
