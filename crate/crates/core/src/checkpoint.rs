//! Policy checkpoints: a JSON manifest plus named arrays.
//!
//! Floats are written in shortest round-trip decimal form, so a reload is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::policy::{ParamSet, PolicyConfig};

pub const FORMAT: &str = "vqalab-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Pipeline stage tag, e.g. `clean/sft`.
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    /// Spec hash of the training data.
    pub data_hash: String,
    pub policy: PolicyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct File {
    manifest: Manifest,
    arrays: BTreeMap<String, Array>,
}

/// Serialize to the on-disk text form.
pub fn to_string(params: &ParamSet, manifest: &Manifest) -> Result<String> {
    let arrays = params
        .shapes()
        .into_iter()
        .map(|(name, shape)| (name.to_string(), Array { shape, data: params.array(name).unwrap().to_vec() }))
        .collect();
    let file = File { manifest: Manifest { policy: params.config.clone(), ..manifest.clone() }, arrays };
    serde_json::to_string(&file).map(|s| s + "\n").map_err(|e| Error::Config(e.to_string()))
}

pub fn save(path: &Path, params: &ParamSet, manifest: &Manifest) -> Result<String> {
    let text = to_string(params, manifest)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Load and validate a checkpoint. Returns the parameters, the manifest and
/// the file's content hash.
pub fn load(path: &Path) -> Result<(ParamSet, Manifest, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: File = serde_json::from_str(&text).map_err(|e| Error::decode(path, e))?;
    if file.manifest.format != FORMAT {
        return Err(Error::decode(path, format!("unknown checkpoint format {:?}", file.manifest.format)));
    }
    let mut params = ParamSet::zeros(&file.manifest.policy);
    for (name, shape) in params.shapes() {
        let arr = file.arrays.get(name).ok_or_else(|| Error::decode(path, format!("missing array {name}")))?;
        if arr.shape != shape {
            return Err(Error::decode(path, format!("array {name} has shape {:?}, expected {shape:?}", arr.shape)));
        }
        *params.array_mut(name).unwrap() = arr.data.clone();
    }
    params.validate().map_err(|e| Error::decode(path, e))?;
    Ok((params, file.manifest, sha256_hex(text.as_bytes())))
}
