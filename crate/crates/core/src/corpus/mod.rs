//! Lyric text: normalization, vocabularies, token sequences and the paired
//! (spectrogram, line) training examples.

mod store;
pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use store::{read_lines_corpus, write_lines_corpus, LineRecord};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MAX_LINE_LEN: usize = 20;

/// Lowercases, deletes apostrophes and turns every other non-alphanumeric
/// character into a separator.
pub fn normalize(line: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(line.len());
    for ch in line.chars() {
        if ch == '\'' || ch == '\u{2019}' {
            continue;
        }
        if ch.is_alphanumeric() {
            cleaned.extend(ch.to_lowercase());
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Token ↔ index map with PAD, BOS, EOS, UNK fixed at indices 0..=3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;
    fn try_from(f: VocabFile) -> Result<Self, String> {
        if f.tokens.len() < 5 || f.tokens[..4] != RESERVED {
            return Err("vocabulary must start with the four reserved tokens and hold at least one word".into());
        }
        let mut index = HashMap::new();
        for (i, t) in f.tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t}"));
            }
        }
        Ok(Self {
            tokens: f.tokens,
            index,
        })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Includes every token seen at least `min_count` times, ordered by
    /// descending frequency then lexicographically.
    pub fn build<S: AsRef<str>>(lines: &[S], min_count: usize) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::EmptyInput("vocabulary corpus"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for tok in normalize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        if words.is_empty() {
            return Err(Error::Vocab(format!(
                "no token reaches min_count {min_count}"
            )));
        }
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Ok(VocabFile { tokens }.try_into().expect("constructed valid"))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[4..].iter().map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// One lyric line as vocabulary indices, wrapped in BOS ... EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    /// Validates the BOS/EOS framing and the absence of PAD.
    pub fn new(ids: Vec<usize>, max_line_len: usize) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || *ids.last().unwrap() != EOS {
            return Err(Error::Vocab("sequence must be framed by BOS and EOS".into()));
        }
        if ids.len() > max_line_len {
            return Err(Error::Vocab(format!(
                "sequence length {} exceeds {max_line_len}",
                ids.len()
            )));
        }
        if ids[1..ids.len() - 1]
            .iter()
            .any(|&t| t == PAD || t == BOS || t == EOS)
        {
            return Err(Error::Vocab("sentinel inside sequence".into()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Content tokens without the sentinels.
    pub fn content(&self) -> &[usize] {
        &self.0[1..self.0.len() - 1]
    }
}

pub fn tokenize(line: &str, vocab: &Vocabulary, max_line_len: usize) -> Result<TokenSequence> {
    if max_line_len < 3 {
        return Err(Error::InvalidConfig("max_line_len must be at least 3".into()));
    }
    let words = normalize(line);
    if words.is_empty() {
        return Err(Error::EmptyInput("line is empty after normalization"));
    }
    let mut ids = Vec::with_capacity(max_line_len);
    ids.push(BOS);
    ids.extend(
        words
            .iter()
            .take(max_line_len - 2)
            .map(|w| vocab.id(w).unwrap_or(UNK)),
    );
    ids.push(EOS);
    TokenSequence::new(ids, max_line_len)
}

/// Joins token strings, dropping PAD/BOS/EOS.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::Vocab(format!("index {id} outside vocabulary of {}", vocab.len())))?;
        if id != PAD && id != BOS && id != EOS {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}

/// A tokenized line paired with the clip it was aligned to.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub tokens: TokenSequence,
    pub spec_ref: String,
    pub embedding: Option<Vec<f64>>,
}

/// Tokenizes aligned lines; lines that normalize to nothing are skipped.
pub fn paired_examples(
    records: &[LineRecord],
    vocab: &Vocabulary,
    max_line_len: usize,
) -> Vec<PairedExample> {
    records
        .iter()
        .filter_map(|r| {
            tokenize(&r.line, vocab, max_line_len)
                .ok()
                .map(|tokens| PairedExample {
                    tokens,
                    spec_ref: r.clip_ref.clone(),
                    embedding: None,
                })
        })
        .collect()
}
