use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Clip, Waveform};
use crate::error::{Error, Result};

/// Start time of one lyric line, as exported from an annotation tool.
#[derive(Debug, Clone, PartialEq)]
pub struct LineAnnotation {
    pub onset: f64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    High,
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub clip_ref: String,
    pub lines: Vec<String>,
    pub precision: Precision,
}

/// Parses `time_seconds,line_text` rows. A first row whose time column is not
/// a number is treated as a header. The text may be double-quoted.
pub fn parse_annotations(text: &str) -> Result<Vec<LineAnnotation>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let row = raw.trim_start_matches('\u{feff}').trim();
        if row.is_empty() {
            continue;
        }
        let (time, rest) = row
            .split_once(',')
            .ok_or_else(|| Error::Annotation(format!("line {}: expected two columns", lineno + 1)))?;
        let onset: f64 = match time.trim().parse() {
            Ok(v) => v,
            Err(_) if lineno == 0 && out.is_empty() => continue,
            Err(_) => {
                return Err(Error::Annotation(format!(
                    "line {}: bad time {time:?}",
                    lineno + 1
                )))
            }
        };
        let mut line = rest.trim().to_string();
        if line.len() >= 2 && line.starts_with('"') && line.ends_with('"') {
            line = line[1..line.len() - 1].replace("\"\"", "\"");
        }
        if line.trim().is_empty() {
            return Err(Error::Annotation(format!("line {}: empty lyric", lineno + 1)));
        }
        if !onset.is_finite() {
            return Err(Error::Annotation(format!("line {}: non-finite time", lineno + 1)));
        }
        out.push(LineAnnotation {
            onset,
            text: line.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<LineAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

/// Assigns each annotated line to the clip whose half-open interval
/// `[start, start + length)` contains its onset.
///
/// Lines falling in the dropped trailing remainder are discarded; clips that
/// receive no line are omitted.
pub fn align_manual(
    w: &Waveform,
    annotations: &[LineAnnotation],
    clips: &[Clip],
) -> Result<Vec<AlignedPair>> {
    let duration = w.duration();
    for pair in annotations.windows(2) {
        if pair[1].onset <= pair[0].onset {
            return Err(Error::Annotation(format!(
                "onsets not strictly increasing at {}",
                pair[1].onset
            )));
        }
    }
    for a in annotations {
        if a.onset < 0.0 || a.onset > duration {
            return Err(Error::Annotation(format!(
                "onset {} outside song duration {duration}",
                a.onset
            )));
        }
        if a.text.trim().is_empty() {
            return Err(Error::Annotation(format!("empty lyric at {}", a.onset)));
        }
    }
    let mut buckets: Vec<Vec<String>> = vec![Vec::new(); clips.len()];
    for a in annotations {
        if let Some(i) = clips
            .iter()
            .position(|c| c.start <= a.onset && a.onset < c.start + c.length)
        {
            buckets[i].push(a.text.trim().to_string());
        }
    }
    Ok(clips
        .iter()
        .zip(buckets)
        .filter(|(_, lines)| !lines.is_empty())
        .map(|(c, lines)| AlignedPair {
            clip_ref: c.clip_ref(),
            lines,
            precision: Precision::High,
        })
        .collect())
}

/// Near-equal contiguous chunk sizes; earlier chunks get the remainder.
pub fn chunk_sizes(items: usize, chunks: usize) -> Vec<usize> {
    let base = items / chunks;
    let extra = items % chunks;
    (0..chunks).map(|i| base + usize::from(i < extra)).collect()
}

/// Splits a song's lines into `clips.len()` contiguous chunks and attaches
/// chunk `i` to clip `i`.
pub fn align_coarse(clips: &[Clip], lines: &[String]) -> Result<Vec<AlignedPair>> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("no clips to align"));
    }
    if lines.is_empty() {
        return Err(Error::EmptyInput("no lyric lines to align"));
    }
    let mut offset = 0;
    let mut out = Vec::new();
    for (clip, size) in clips.iter().zip(chunk_sizes(lines.len(), clips.len())) {
        if size > 0 {
            out.push(AlignedPair {
                clip_ref: clip.clip_ref(),
                lines: lines[offset..offset + size].to_vec(),
                precision: Precision::Coarse,
            });
        }
        offset += size;
    }
    Ok(out)
}
