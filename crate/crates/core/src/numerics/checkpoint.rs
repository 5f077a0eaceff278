//! Checkpoint files: a JSON manifest plus one little-endian blob.
//!
//! ```text
//! <dir>/checkpoint.json   {"version":1,"blob":"checkpoint.bin","tensors":[{name,shape,dtype,byte_offset}, ...]}
//! <dir>/checkpoint.bin    tensors back to back, little-endian
//! ```
//!
//! Values are written in the store's element type, so a save/load cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

fn encode<T: Scalar>(v: T, out: &mut Vec<u8>) {
    match T::DTYPE {
        "f32" => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

/// Serialize every entry of `store` (parameters and buffers).
pub fn to_bytes<T: Scalar>(store: &ParamStore<T>) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            byte_offset: blob.len() as u64,
        });
        for &v in p.value.data() {
            encode(v, &mut blob);
        }
    }
    (CheckpointManifest { version: 1, blob: BLOB_FILE.to_string(), tensors }, blob)
}

/// Decode named tensors from a manifest and blob.
pub fn tensors_from_bytes<T: Scalar>(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let size = dtype_size(&e.dtype)?;
        let numel: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + numel * size;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the end of the blob", e.name)))?;
        let data: Vec<T> = bytes
            .chunks_exact(size)
            .map(|c| match size {
                4 => T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => T::from_f64(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(out)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = to_bytes(store);
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Overwrite the values in `store` with the checkpoint in `dir`. Every entry
/// of the store must be present with a matching shape.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let tensors = tensors_from_bytes::<T>(&manifest, &blob)?;
    let mut loaded = ParamStore::<T>::new();
    for (name, t) in tensors {
        loaded.add(name, t, super::param::ParamKind::Buffer)?;
    }
    store.load_values_from(&loaded)
}
