use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::error::{Error, Result};
use crate::tensor_io;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub song_id: String,
    pub start: f64,
    pub file: String,
}

/// JSON sidecar mapping clip_ref to its tensor file.
pub type SpectrogramIndex = BTreeMap<String, IndexEntry>;

fn file_name(clip_ref: &str) -> String {
    let safe: String = clip_ref
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.mspc")
}

/// Writes one tensor file per spectrogram plus `index.json`.
pub fn save_spectrograms<'a>(
    dir: &Path,
    items: impl IntoIterator<Item = (&'a Spectrogram, &'a str, f64)>,
) -> Result<SpectrogramIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = SpectrogramIndex::new();
    for (spec, song_id, start) in items {
        let file = file_name(&spec.clip_ref);
        tensor_io::write(&dir.join(&file), &spec.values)?;
        let prev = index.insert(
            spec.clip_ref.clone(),
            IndexEntry {
                song_id: song_id.to_string(),
                start,
                file,
            },
        );
        if prev.is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate clip_ref {}",
                spec.clip_ref
            )));
        }
    }
    let path = dir.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Loads every indexed spectrogram, ordered by clip_ref.
pub fn load_spectrograms(dir: &Path) -> Result<Vec<(String, IndexEntry, Array2<f64>)>> {
    let path = dir.join(INDEX_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: SpectrogramIndex = serde_json::from_slice(&bytes)?;
    index
        .into_iter()
        .map(|(clip_ref, entry)| {
            let values = tensor_io::read(&dir.join(&entry.file))?;
            Ok((clip_ref, entry, values))
        })
        .collect()
}
