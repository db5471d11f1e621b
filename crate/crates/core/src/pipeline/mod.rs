//! End-to-end runs: configuration, on-disk layout, per-stage manifests and
//! the stage functions the CLI dispatches to.

mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::MelConfig;
use crate::error::{Error, Result};
use crate::spec_vae::{SpecTrainConfig, SpecVaeConfig};
use crate::text_vae::TextTrainConfig;

pub use stages::{
    evaluate, generate, load_clips, load_embeddings, preprocess, run_all, synth_data, train_spec_vae_stage,
    train_text_vae_stage, ClipMeta, EvaluationSummary, GenerateOptions, SongEntry,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_songs_per_class: usize,
    pub test_songs_per_class: usize,
    pub albums_per_class: usize,
    pub sample_rate: u32,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub min_lines_per_clip: usize,
    pub max_lines_per_clip: usize,
    /// Class index per segment of the alternating test song; empty disables it.
    pub alternating_pattern: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_songs_per_class: 40,
            test_songs_per_class: 8,
            albums_per_class: 2,
            sample_rate: 22050,
            min_seconds: 30.0,
            max_seconds: 60.0,
            min_lines_per_clip: 3,
            max_lines_per_clip: 5,
            alternating_pattern: vec![0, 1, 0, 0, 1, 1, 0, 1, 0, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextArchConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
}

impl Default for TextArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden: 256,
            latent_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_lines: usize,
    pub temperature: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_lines: 100,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalPool {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub persistence: f64,
    pub depth: usize,
    pub smoothing: f64,
    pub retrieval_ns: Vec<usize>,
    pub retrieval_pool: RetrievalPool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            persistence: crate::eval::DEFAULT_PERSISTENCE,
            depth: crate::eval::DEFAULT_DEPTH,
            smoothing: crate::eval::DEFAULT_SMOOTHING,
            retrieval_ns: vec![50, 100],
            retrieval_pool: RetrievalPool::All,
        }
    }
}

/// Everything a run needs. `spec_vae.input_shape`, the training seeds and
/// the text model's vocabulary/conditioning sizes are derived at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub clip_length: f64,
    pub mel: MelConfig,
    pub vocab_min_count: usize,
    pub max_line_len: usize,
    pub spec_vae: SpecVaeConfig,
    pub spec_train: SpecTrainConfig,
    pub text_vae: TextArchConfig,
    pub text_train: TextTrainConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            clip_length: 10.0,
            mel: MelConfig::default(),
            vocab_min_count: 1,
            max_line_len: crate::corpus::DEFAULT_MAX_LINE_LEN,
            spec_vae: SpecVaeConfig::default(),
            spec_train: SpecTrainConfig::default(),
            text_vae: TextArchConfig::default(),
            text_train: TextTrainConfig::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small architecture at 8 kHz that trains on a CPU in minutes.
    pub fn compact() -> Self {
        Self {
            data: DataConfig {
                train_songs_per_class: 56,
                test_songs_per_class: 8,
                sample_rate: 8000,
                ..DataConfig::default()
            },
            mel: MelConfig {
                sample_rate: 8000,
                window_size: 1024,
                hop: 512,
                n_mels: 32,
                f_min: 0.0,
                f_max: 4000.0,
                db_floor: -80.0,
            },
            spec_vae: SpecVaeConfig {
                channels: vec![8, 16, 32, 32],
                latent_dim: 16,
                ..SpecVaeConfig::default()
            },
            spec_train: SpecTrainConfig {
                epochs: 30,
                batch_size: 32,
                lr: 2e-3,
                kl_warmup_epochs: 10,
                ..SpecTrainConfig::default()
            },
            text_vae: TextArchConfig {
                embed_dim: 32,
                hidden: 64,
                latent_dim: 16,
            },
            text_train: TextTrainConfig {
                epochs: 25,
                batch_size: 32,
                lr: 3e-3,
                kl_warmup_epochs: 8,
                ..TextTrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.data.sample_rate != self.mel.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "data.sample_rate {} differs from mel.sample_rate {}",
                self.data.sample_rate, self.mel.sample_rate
            )));
        }
        if !(self.clip_length > 0.0) {
            return Err(Error::InvalidConfig("clip_length must be positive".into()));
        }
        if self.generate.n_lines == 0 {
            return Err(Error::InvalidConfig("generate.n_lines must be at least 1".into()));
        }
        if !(self.eval.persistence > 0.0 && self.eval.persistence < 1.0) || self.eval.depth == 0 {
            return Err(Error::InvalidConfig("eval.persistence must be in (0,1) and depth ≥ 1".into()));
        }
        Ok(())
    }

    /// Parses a JSON config and applies `key.path=value` overrides. Values
    /// that parse as JSON are used as such, anything else as a string.
    pub fn from_json(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = match text {
            Some(t) => serde_json::from_str(t)?,
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::from_json(text.as_deref(), overrides)
    }
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::InvalidConfig("empty override key".into()))
}

/// Directory layout of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn preprocess(&self) -> PathBuf {
        self.root.join("preprocess")
    }

    pub fn spec_vae(&self) -> PathBuf {
        self.root.join("spec_vae")
    }

    pub fn text_vae(&self) -> PathBuf {
        self.root.join("text_vae")
    }

    pub fn generate(&self) -> PathBuf {
        self.root.join("generate")
    }

    pub fn evaluate(&self) -> PathBuf {
        self.root.join("evaluate")
    }
}

pub const STAGE_MANIFEST: &str = "run_manifest.json";

/// Written by every stage into its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub config: RunConfig,
    /// sha256 of each checkpoint the stage read or wrote, keyed by role.
    pub checkpoints: BTreeMap<String, String>,
    pub version: String,
}

impl StageManifest {
    pub fn new(stage: &str, seed: u64, config: &RunConfig) -> Self {
        Self {
            stage: stage.to_string(),
            seed,
            config: config.clone(),
            checkpoints: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(STAGE_MANIFEST), self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_to_nested_keys() {
        let cfg = RunConfig::from_json(
            None,
            &["spec_train.epochs=3".into(), "seed=11".into(), "eval.retrieval_pool=test".into()],
        )
        .unwrap();
        assert_eq!(cfg.spec_train.epochs, 3);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.eval.retrieval_pool, RetrievalPool::Test);
        assert!(RunConfig::from_json(None, &["nope".into()]).is_err());
        assert!(RunConfig::from_json(None, &["bogus_key=1".into()]).is_err());
        assert!(RunConfig::from_json(None, &["seed.inner=1".into()]).is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(Some(r#"{"seed": 3, "text_train": {"epochs": 2}}"#), &[]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.text_train.epochs, 2);
        assert_eq!(cfg.text_train.word_dropout, 0.4);
        assert_eq!(cfg.mel, MelConfig::default());
    }

    #[test]
    fn mismatched_rates_rejected() {
        assert!(RunConfig::from_json(None, &["data.sample_rate=8000".into()]).is_err());
        RunConfig::compact().validate().unwrap();
        let text = serde_json::to_string(&RunConfig::compact()).unwrap();
        assert_eq!(RunConfig::from_json(Some(&text), &[]).unwrap(), RunConfig::compact());
    }
}
