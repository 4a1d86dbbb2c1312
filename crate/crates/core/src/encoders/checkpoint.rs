//! Flat parameter catalog: `<base>.json` manifest plus `<base>.bin` blob of
//! little-endian IEEE-754 values, tensors packed in name order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const FORMAT: &str = "glioprog-params";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    /// Free-form description of the producing model (e.g. its patch config).
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (base.with_file_name(format!("{name}.json")), base.with_file_name(format!("{name}.bin")))
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, base: &Path, meta: &serde_json::Value) -> Result<()> {
    let (json, bin) = checkpoint_paths(base);
    if let Some(dir) = json.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut blob = Vec::with_capacity(store.numel() * T::BYTES);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let offset = blob.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        meta: meta.clone(),
        tensors,
    };
    fs::write(&json, serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(&bin, blob)?;
    Ok(())
}

fn decode<T: Real, S: Real>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(S::BYTES).map(|c| T::from_f64(S::read_le(c).to_f64())).collect()
}

/// Loads a checkpoint into element type `T`. Same-dtype loads are bit-exact;
/// f64 files loaded as f32 are rounded.
pub fn load_checkpoint<T: Real>(base: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let (json, bin) = checkpoint_paths(base);
    if !json.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", json.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&json)?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint {} v{}",
            json.display(),
            manifest.format,
            manifest.version
        )));
    }
    let width = match manifest.dtype.as_str() {
        "f64le" => 8,
        "f32le" => 4,
        other => return Err(Error::Format(format!("{}: unknown dtype {other}", json.display()))),
    };
    let blob = fs::read(&bin)?;
    let expected: usize = manifest.tensors.iter().map(|e| e.nbytes).sum();
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} payload bytes, found {}",
            bin.display(),
            blob.len()
        )));
    }
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if count * width != e.nbytes || e.offset + e.nbytes > blob.len() {
            return Err(Error::Format(format!(
                "tensor `{}`: shape {:?} does not match {} bytes at offset {}",
                e.name, e.shape, e.nbytes, e.offset
            )));
        }
        let bytes = &blob[e.offset..e.offset + e.nbytes];
        let data = if width == 8 {
            decode::<T, f64>(bytes)
        } else {
            decode::<T, f32>(bytes)
        };
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((store, manifest.meta))
}
