//! Trained checkpoints loaded once at startup.

use std::io::Cursor;
use std::path::Path;

use lyricmuse_core::audio::{decode_wav, mel_spectrogram, n_frames, segment_clips, MelConfig, SpecNormalizer};
use lyricmuse_core::corpus::Vocabulary;
use lyricmuse_core::spec_vae::SpecVae;
use lyricmuse_core::text_vae::{GenerationRequest, TextVae};
use lyricmuse_core::{checkpoint, Error as CoreError};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const DEFAULT_CLIP_LENGTH: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub spec_vae: String,
    pub text_vae: String,
}

pub struct ModelBundle {
    pub spec: SpecVae,
    pub mel: MelConfig,
    pub norm: SpecNormalizer,
    pub text: TextVae,
    pub vocab: Vocabulary,
    pub clip_length: f64,
    pub versions: ModelVersions,
}

/// One clip cut from an upload.
#[derive(Debug, Clone)]
pub struct ProcessedClip {
    pub index: usize,
    pub start: f64,
    pub duration: f64,
    pub peak_db: f64,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
    pub spectrogram: Array2<f64>,
    pub embedding: Vec<f64>,
}

fn clip_length_from_manifest(run_dir: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(run_dir.join("spec_vae").join("run_manifest.json")).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value["config"]["clip_length"].as_f64()
}

impl ModelBundle {
    /// Loads `spec_vae/checkpoint`, `text_vae/checkpoint` and
    /// `text_vae/vocab.json` from a pipeline run directory.
    ///
    /// The clip length comes from `clip_length` when given, else from the
    /// spectrogram stage manifest, else the default.
    pub fn load(run_dir: &Path, clip_length: Option<f64>) -> Result<Self> {
        let spec_dir = run_dir.join("spec_vae").join("checkpoint");
        let text_dir = run_dir.join("text_vae").join("checkpoint");
        let (spec, mel, norm, _) = SpecVae::load(&spec_dir)?;
        let (text, _) = TextVae::load(&text_dir)?;
        let vocab = Vocabulary::load(&run_dir.join("text_vae").join("vocab.json"))?;
        let clip_length = clip_length
            .or_else(|| clip_length_from_manifest(run_dir))
            .unwrap_or(DEFAULT_CLIP_LENGTH);
        let versions = ModelVersions {
            spec_vae: checkpoint::digest(&spec_dir)?,
            text_vae: checkpoint::digest(&text_dir)?,
        };
        let bundle = Self { spec, mel, norm, text, vocab, clip_length, versions };
        bundle.check_consistency()?;
        Ok(bundle)
    }

    fn check_consistency(&self) -> Result<()> {
        let mismatch = |m: String| ServiceError::Core(CoreError::InvalidConfig(m));
        let samples = (self.clip_length * self.mel.sample_rate as f64).round() as usize;
        let frames = n_frames(samples, self.mel.hop);
        let expected = self.spec.config.input_shape;
        if (self.mel.n_mels, frames) != expected {
            return Err(mismatch(format!(
                "clip length {} s gives spectrograms of {:?}, model expects {:?}",
                self.clip_length,
                (self.mel.n_mels, frames),
                expected
            )));
        }
        if self.text.config.cond_dim != self.spec.latent_dim() {
            return Err(mismatch(format!(
                "text model conditions on {} dims, spectrogram latent has {}",
                self.text.config.cond_dim,
                self.spec.latent_dim()
            )));
        }
        if self.text.config.vocab_size != self.vocab.len() {
            return Err(mismatch(format!(
                "text model vocabulary {} differs from vocab.json {}",
                self.text.config.vocab_size,
                self.vocab.len()
            )));
        }
        Ok(())
    }

    /// Decodes WAV bytes, resamples to the model rate, cuts clips and embeds
    /// each with its posterior mean.
    pub fn process_upload(&self, bytes: &[u8], name: &str) -> Result<Vec<ProcessedClip>> {
        let mut wave = decode_wav(Cursor::new(bytes), true, name.to_string())
            .map_err(|e| ServiceError::BadRequest(format!("could not decode audio: {e}")))?;
        if wave.sample_rate != self.mel.sample_rate {
            wave = wave.resampled(self.mel.sample_rate);
        }
        let clips = segment_clips(&wave, self.clip_length)?;
        if clips.is_empty() {
            return Err(ServiceError::BadRequest(format!(
                "audio is {:.2} s long, shorter than one {} s clip",
                wave.duration(),
                self.clip_length
            )));
        }
        clips
            .into_iter()
            .map(|clip| {
                let spec = mel_spectrogram(&clip, &self.mel)?;
                let normalized = self.norm.apply(&spec.values);
                let posterior = self.spec.encode(&normalized)?;
                Ok(ProcessedClip {
                    index: clip.index,
                    start: clip.start,
                    duration: clip.length,
                    peak_db: clip.peak_db(),
                    sample_rate: clip.sample_rate,
                    spectrogram: normalized,
                    embedding: posterior.mu,
                    samples: clip.samples,
                })
            })
            .collect()
    }

    pub fn generate(&self, embedding: Vec<f64>, n_lines: usize, temperature: f64, seed: u64) -> Result<Vec<String>> {
        let req = GenerationRequest {
            embedding,
            n_lines,
            temperature,
            max_len: self.text.config.max_line_len,
            seed,
        };
        Ok(self.text.generate_lines(&req, &self.vocab)?)
    }
}
