//! Weight checkpoints: `VBCCKPT1`, u32 LE manifest length, JSON manifest,
//! then every parameter as little-endian f32 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ArchitectureSpec, Model};
use crate::volume::{frame, split_framed};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VBCCKPT1";
const FORMAT_VERSION: u32 = 1;

/// Training provenance stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fold: Option<usize>,
    /// Epoch (0-based) whose weights these are.
    pub epoch: usize,
    /// Monitored mean foreground validation dice at that epoch.
    pub val_dice: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    architecture: ArchitectureSpec,
    parameters: Vec<ParamEntry>,
    metadata: CheckpointMeta,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_checkpoint(model: &Model<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture: *model.spec(),
        parameters: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        metadata: meta.clone(),
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut payload = Vec::with_capacity(model.param_count() * 4);
    for p in model.params().iter() {
        for v in &p.value {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(frame(CHECKPOINT_MAGIC, &header, &payload))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model<f32>, CheckpointMeta)> {
    let (header, payload) = split_framed(CHECKPOINT_MAGIC, bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_slice(header).map_err(|e| Error::Checkpoint(format!("invalid manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let mut model = Model::<f32>::build(manifest.architecture, 0)?;
    if model.params().len() != manifest.parameters.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, architecture has {}",
            manifest.parameters.len(),
            model.params().len()
        )));
    }
    let expected = model.param_count() * 4;
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            found: payload.len(),
        });
    }
    let mut chunks = payload.chunks_exact(4);
    for (p, entry) in model.params_mut().iter_mut().zip(&manifest.parameters) {
        if p.name != entry.name || p.shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match architecture {} {:?}",
                entry.name, entry.shape, p.name, p.shape
            )));
        }
        for v in p.value.iter_mut() {
            *v = f32::from_le_bytes(chunks.next().expect("payload length checked").try_into().unwrap());
        }
    }
    Ok((model, manifest.metadata))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>, meta: &CheckpointMeta) -> Result<String> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, meta)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint and returns it with the SHA-256 of the file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, CheckpointMeta, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, meta) = decode_checkpoint(&bytes)?;
    Ok((model, meta, sha256_hex(&bytes)))
}

/// All `*.ckpt` files of a directory, sorted by name.
pub fn checkpoint_files(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Checkpoint(format!("no .ckpt files in {}", dir.display())));
    }
    Ok(out)
}
