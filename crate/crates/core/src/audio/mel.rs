use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Clip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub db_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            window_size: 2048,
            hop: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: 11025.0,
            db_floor: -80.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad("require 0 <= f_min < f_max <= sample_rate/2");
        }
        if self.window_size < 2 || self.hop == 0 || self.hop > self.window_size {
            return bad("require 0 < hop <= window_size");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if !(self.db_floor.is_finite() && self.db_floor < 0.0) {
            return bad("db_floor must be finite and negative");
        }
        Ok(())
    }

    /// Short identifier recorded alongside spectrograms.
    pub fn id(&self) -> String {
        format!(
            "sr{}-w{}-h{}-m{}-f{}-{}",
            self.sample_rate, self.window_size, self.hop, self.n_mels, self.f_min, self.f_max
        )
    }
}

/// MEL power in dB, `[n_mels, n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f64>,
    pub clip_ref: String,
    pub config_ref: String,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn mel_points(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Center frequency in Hz of each MEL filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let pts = mel_points(cfg);
    pts[1..pts.len() - 1].to_vec()
}

/// Triangular filters of unit peak, `[n_mels, window_size/2 + 1]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.window_size / 2 + 1;
    let pts = mel_points(cfg);
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.window_size as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let (left, center, right) = (pts[m], pts[m + 1], pts[m + 2]);
        let f = bin_hz(k);
        let rising = (f - left) / (center - left);
        let falling = (right - f) / (right - center);
        rising.min(falling).max(0.0)
    })
}

/// Frame count for centered framing.
pub fn n_frames(n_samples: usize, hop: usize) -> usize {
    n_samples / hop + 1
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT (Hann window, zero-padded centered frames), triangular MEL
/// filterbank, then power in dB clamped at `db_floor`.
pub fn mel_spectrogram(clip: &Clip, cfg: &MelConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            clip: clip.sample_rate,
            config: cfg.sample_rate,
        });
    }
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.window_size);
    let window = hann(cfg.window_size);
    let bank = mel_filterbank(cfg);
    let n_bins = cfg.window_size / 2 + 1;
    let frames = n_frames(clip.samples.len(), cfg.hop);
    let half = (cfg.window_size / 2) as isize;

    let mut power = Array2::<f64>::zeros((n_bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window_size];
    for t in 0..frames {
        let origin = (t * cfg.hop) as isize - half;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = origin + i as isize;
            let s = if idx >= 0 && (idx as usize) < clip.samples.len() {
                clip.samples[idx as usize] as f64
            } else {
                0.0
            };
            *slot = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[k, t]] = buf[k].norm_sqr();
        }
    }
    let mel = bank.dot(&power);
    let floor = cfg.db_floor;
    let values = mel.mapv(|p| {
        if p > 0.0 {
            (10.0 * p.log10()).max(floor)
        } else {
            floor
        }
    });
    Ok(Spectrogram {
        values,
        clip_ref: clip.clip_ref(),
        config_ref: cfg.id(),
    })
}

/// Maps absolute dB spectrograms to `[0, 1]` relative to the loudest cell of
/// the fitting corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecNormalizer {
    pub ref_db: f64,
    pub db_floor: f64,
}

impl SpecNormalizer {
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a Spectrogram>, db_floor: f64) -> Self {
        let ref_db = specs
            .into_iter()
            .flat_map(|s| s.values.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        let ref_db = if ref_db.is_finite() { ref_db } else { 0.0 };
        Self { ref_db, db_floor }
    }

    pub fn apply(&self, values: &Array2<f64>) -> Array2<f64> {
        let floor = self.db_floor;
        values.mapv(|v| (((v - self.ref_db).max(floor)).min(0.0) - floor) / -floor)
    }
}
