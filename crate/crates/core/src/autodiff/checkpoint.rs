//! Parameter checkpoints: `manifest.json` describing every tensor plus
//! `params.bin` holding the little-endian f32 values back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::cube::write_atomic;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "hsiseg-params";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Byte offset into `params.bin`.
    pub offset: u64,
    /// Number of f32 values.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_params(store: &ParamStore<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            trainable: p.trainable,
            offset: blob.len() as u64,
            len: p.value.len(),
        });
        for v in &p.value {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        byte_order: "little".into(),
        tensors,
    };
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(0, format!("unknown checkpoint format '{}'", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            0,
            format!("unsupported checkpoint version {}", manifest.version),
        ));
    }
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(Error::format(0, "checkpoint must be little-endian f32"));
    }
    let blob = fs::read(dir.join(BLOB))?;
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let start = t.offset as usize;
        let end = start
            .checked_add(t.len.saturating_mul(4))
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| {
                Error::format(blob.len() as u64, format!("truncated blob for '{}'", t.name))
            })?;
        let value = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.add(&t.name, &t.shape, value, t.trainable)?;
    }
    Ok(store)
}

/// Loads a checkpoint into an existing store with the same layout.
pub fn load_params_into(store: &mut ParamStore<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let loaded = load_params(dir)?;
    store.copy_values_from(&loaded)
}
