//! Model checkpoints: a directory holding `manifest.json` and one binary
//! tensor file per parameter in the same layout as spectrogram files.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::tensor_io;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub architecture: serde_json::Value,
    /// Model-specific extras (MEL settings, normalisation, vocabulary size).
    pub extra: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub parameters: Vec<ParamEntry>,
}

fn as_matrix(t: &Tensor) -> Array2<f64> {
    let shape = t.shape();
    let rows = if shape.len() >= 2 { shape[0] } else { 1 };
    let cols = t.len() / rows.max(1);
    Array2::from_shape_vec((rows, cols), t.iter().copied().collect()).expect("element count")
}

pub fn save(
    dir: &Path,
    kind: &str,
    architecture: serde_json::Value,
    extra: serde_json::Value,
    seed: u64,
    epoch: usize,
    params: &ParamStore,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, (name, tensor)) in params.iter().enumerate() {
        let file = format!("p{i:03}.bin");
        tensor_io::write(&dir.join(&file), &as_matrix(tensor))?;
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        architecture,
        extra,
        seed,
        epoch,
        parameters: entries,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path, expected_kind: &str) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint, expected {expected_kind}",
            dir.display(),
            manifest.kind
        )));
    }
    let mut values = BTreeMap::new();
    for p in &manifest.parameters {
        let m = tensor_io::read(&dir.join(&p.file))?;
        let t = Tensor::from_shape_vec(IxDyn(&p.shape), m.into_iter().collect()).map_err(|_| {
            Error::Checkpoint(format!("parameter {} does not match shape {:?}", p.name, p.shape))
        })?;
        values.insert(p.name.clone(), t);
    }
    Ok((manifest, values))
}

/// SHA-256 over the manifest and every parameter file, hex encoded.
pub fn digest(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    for p in &manifest.parameters {
        let f = dir.join(&p.file);
        hasher.update(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
