use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{AlignedPair, Precision};
use crate::error::{Error, Result};

pub const LINES_FILE: &str = "lines.txt";
pub const LINES_INDEX_FILE: &str = "lines.json";

/// One aligned lyric line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub line: String,
    pub clip_ref: String,
    pub precision: Precision,
}

#[derive(Serialize, Deserialize)]
struct IndexValue {
    clip_ref: String,
    precision: Precision,
}

/// Writes `lines.txt` (one line per row) and `lines.json` mapping each row
/// index to its clip_ref.
pub fn write_lines_corpus(dir: &Path, pairs: &[AlignedPair]) -> Result<Vec<LineRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::new();
    let mut index = BTreeMap::new();
    let mut records = Vec::new();
    for pair in pairs {
        for line in &pair.lines {
            let single = line.replace(['\n', '\r'], " ");
            index.insert(
                records.len(),
                IndexValue {
                    clip_ref: pair.clip_ref.clone(),
                    precision: pair.precision,
                },
            );
            text.push_str(&single);
            text.push('\n');
            records.push(LineRecord {
                line: single,
                clip_ref: pair.clip_ref.clone(),
                precision: pair.precision,
            });
        }
    }
    let lines_path = dir.join(LINES_FILE);
    std::fs::write(&lines_path, text).map_err(|e| Error::io(&lines_path, e))?;
    let index_path = dir.join(LINES_INDEX_FILE);
    std::fs::write(&index_path, serde_json::to_vec_pretty(&index)?)
        .map_err(|e| Error::io(&index_path, e))?;
    Ok(records)
}

pub fn read_lines_corpus(dir: &Path) -> Result<Vec<LineRecord>> {
    let lines_path = dir.join(LINES_FILE);
    let text = std::fs::read_to_string(&lines_path).map_err(|e| Error::io(&lines_path, e))?;
    let index_path = dir.join(LINES_INDEX_FILE);
    let bytes = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: BTreeMap<usize, IndexValue> = serde_json::from_slice(&bytes)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let v = index
                .get(&i)
                .ok_or_else(|| Error::Vocab(format!("line {i} missing from {LINES_INDEX_FILE}")))?;
            Ok(LineRecord {
                line: line.to_string(),
                clip_ref: v.clip_ref.clone(),
                precision: v.precision,
            })
        })
        .collect()
}
