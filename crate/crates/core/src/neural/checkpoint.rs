//! Checkpoint directories: `manifest.json` plus `params.bin`, a flat
//! little-endian `f32` payload addressed by the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::textproc::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

/// Adam moment estimates aligned with the parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab_fingerprint: String,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Offset into the payload, in bytes.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: ModelConfig,
    vocab_fingerprint: String,
    step: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload: Vec<u8> = Vec::with_capacity(ckpt.model.params().num_scalars() * 4);
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>, payload: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name,
            shape: [t.rows(), t.cols()],
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in ckpt.model.params().iter() {
        push(name.to_string(), t, &mut payload);
    }
    if let Some(opt) = &ckpt.optimizer {
        let names = ckpt.model.params().names();
        for (name, t) in names.iter().zip(&opt.first_moment) {
            push(format!("adam.m/{name}"), t, &mut payload);
        }
        for (name, t) in names.iter().zip(&opt.second_moment) {
            push(format!("adam.v/{name}"), t, &mut payload);
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        config: ckpt.model.config().clone(),
        vocab_fingerprint: ckpt.vocab_fingerprint.clone(),
        step: ckpt.step,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        tensors,
        payload_bytes: payload.len(),
    };
    // Manifest last, so a directory with a manifest holds a full payload.
    let payload_path = dir.join(PAYLOAD_FILE);
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))
}

/// Loads a checkpoint and checks it was trained against `vocab`.
pub fn load_checkpoint(dir: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = load_checkpoint_unchecked(dir)?;
    if ckpt.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: ckpt.vocab_fingerprint,
            found: vocab.fingerprint().to_string(),
        });
    }
    Ok(ckpt)
}

/// Loads a checkpoint without the vocabulary guard.
pub fn load_checkpoint_unchecked(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let payload_path = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if payload.len() != manifest.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest expects {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }

    let mut params = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut expected_offset = 0usize;
    for entry in &manifest.tensors {
        let [rows, cols] = entry.shape;
        let bytes = rows * cols * 4;
        if entry.offset != expected_offset || entry.offset + bytes > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` of shape {rows}x{cols} does not fit the payload at offset {}",
                entry.name, entry.offset
            )));
        }
        let data: Vec<f32> = payload[entry.offset..entry.offset + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        expected_offset += bytes;
        let t = Tensor::new(rows, cols, data)?;
        if entry.name.starts_with("adam.m/") {
            first.push(t);
        } else if entry.name.starts_with("adam.v/") {
            second.push(t);
        } else {
            params.insert(entry.name.clone(), t)?;
        }
    }
    if expected_offset != payload.len() {
        return Err(Error::Checkpoint(format!(
            "manifest covers {expected_offset} bytes of a {}-byte payload",
            payload.len()
        )));
    }
    let model = Model::from_parts(manifest.config, params)?;
    let optimizer = match manifest.optimizer_step {
        Some(step) => {
            let n = model.params().len();
            if first.len() != n || second.len() != n {
                return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
            }
            Some(OptimizerState {
                step,
                first_moment: first,
                second_moment: second,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        vocab_fingerprint: manifest.vocab_fingerprint,
        optimizer,
        step: manifest.step,
    })
}
