//! Song audio: loading, fixed-length segmentation, MEL spectrograms,
//! peak level and lyric alignment.

mod align;
mod mel;
mod store;

use std::io::{Read, Seek};
use std::path::Path;

pub use align::{
    align_coarse, align_manual, chunk_sizes, parse_annotations, read_annotations, AlignedPair,
    LineAnnotation, Precision,
};
pub use mel::{
    hz_to_mel, mel_center_frequencies, mel_filterbank, mel_spectrogram, mel_to_hz, n_frames,
    MelConfig, SpecNormalizer, Spectrogram,
};
pub use store::{load_spectrograms, save_spectrograms, IndexEntry, SpectrogramIndex};

use crate::error::{Error, Result};

/// Level assigned to digital silence.
pub const DEFAULT_DB_FLOOR: f64 = -80.0;

/// Mono audio of one song.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub song_id: String,
    pub album_id: String,
    pub artist_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32, song_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
            song_id: song_id.into(),
            album_id: String::new(),
            artist_id: String::new(),
        })
    }

    pub fn with_labels(mut self, album: impl Into<String>, artist: impl Into<String>) -> Self {
        self.album_id = album.into();
        self.artist_id = artist.into();
        self
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling to `target` Hz.
    pub fn resampled(&self, target: u32) -> Waveform {
        if target == self.sample_rate || self.samples.is_empty() {
            return Waveform {
                sample_rate: target,
                ..self.clone()
            };
        }
        let ratio = self.sample_rate as f64 / target as f64;
        let n_out = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = (pos - lo as f64) as f32;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Waveform {
            samples,
            sample_rate: target,
            ..self.clone()
        }
    }
}

/// A fixed-length excerpt of a song.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub song_id: String,
    pub index: usize,
    /// Start time in seconds.
    pub start: f64,
    /// Nominal length in seconds.
    pub length: f64,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl Clip {
    /// Stable identifier `<song_id>#<index>`.
    pub fn clip_ref(&self) -> String {
        clip_ref(&self.song_id, self.index)
    }

    pub fn peak_db(&self) -> f64 {
        peak_db(&self.samples, DEFAULT_DB_FLOOR)
    }
}

pub fn clip_ref(song_id: &str, index: usize) -> String {
    format!("{song_id}#{index:03}")
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float, one or two channels).
///
/// With `downmix` set, stereo is averaged to mono; otherwise the first channel
/// is kept. The song id is the file stem.
pub fn load_waveform(path: &Path, downmix: bool) -> Result<Waveform> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(std::io::BufReader::new(file), downmix, stem)
}

pub fn decode_wav<R: Read + Seek>(reader: R, downmix: bool, song_id: String) -> Result<Waveform> {
    let reader = hound::WavReader::new(reader)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedEncoding(format!("{channels} channels")));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{fmt:?} {bits}-bit")));
        }
    };
    if interleaved.len() < channels {
        return Err(Error::EmptyAudio);
    }
    let samples = if channels == 1 {
        interleaved
    } else if downmix {
        interleaved
            .chunks_exact(2)
            .map(|f| 0.5 * (f[0] + f[1]))
            .collect()
    } else {
        interleaved.chunks_exact(2).map(|f| f[0]).collect()
    };
    Waveform::new(samples, spec.sample_rate, song_id)
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(quantize_i16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

/// Encodes mono 16-bit PCM into an in-memory WAV file.
pub fn encode_wav(samples: &[f32], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
        for &s in samples {
            writer.write_sample(quantize_i16(s))?;
        }
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}

fn quantize_i16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Cuts consecutive non-overlapping clips from time 0; a trailing remainder
/// shorter than `clip_length` is dropped.
pub fn segment_clips(w: &Waveform, clip_length: f64) -> Result<Vec<Clip>> {
    if !(clip_length > 0.0) || !clip_length.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "clip length must be positive, got {clip_length}"
        )));
    }
    let per_clip = (clip_length * w.sample_rate as f64).round() as usize;
    if per_clip == 0 {
        return Err(Error::InvalidConfig("clip shorter than one sample".into()));
    }
    Ok(w.samples
        .chunks_exact(per_clip)
        .enumerate()
        .map(|(index, chunk)| Clip {
            song_id: w.song_id.clone(),
            index,
            start: index as f64 * clip_length,
            length: clip_length,
            sample_rate: w.sample_rate,
            samples: chunk.to_vec(),
        })
        .collect())
}

/// `20·log10(max |sample|)`, never below `floor`.
pub fn peak_db(samples: &[f32], floor: f64) -> f64 {
    let peak = samples.iter().fold(0.0f64, |m, &s| m.max((s as f64).abs()));
    if peak <= 0.0 {
        return floor;
    }
    (20.0 * peak.log10()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(seconds: f64, sr: u32) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n).map(|i| (i as f32 * 0.01).sin() * 0.3).collect();
        Waveform::new(samples, sr, "song").unwrap()
    }

    fn wav_bytes(spec: hound::WavSpec, write: impl FnOnce(&mut hound::WavWriter<&mut std::io::Cursor<Vec<u8>>>)) -> Vec<u8> {
        let mut cursor = std::io::Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut cursor, spec).unwrap();
            write(&mut w);
            w.finalize().unwrap();
        }
        cursor.into_inner()
    }

    #[test]
    fn one_second_mono_16bit() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let bytes = wav_bytes(spec, |w| {
            for i in 0..22050 {
                w.write_sample((i % 100) as i16).unwrap();
            }
        });
        let wf = decode_wav(std::io::Cursor::new(bytes), true, "x".into()).unwrap();
        assert_eq!(wf.samples.len(), 22050);
        assert_eq!(wf.duration(), 1.0);
    }

    #[test]
    fn stereo_downmix_cancels() {
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let bytes = wav_bytes(spec, |w| {
            for _ in 0..100 {
                w.write_sample(0.5f32).unwrap();
                w.write_sample(-0.5f32).unwrap();
            }
        });
        let wf = decode_wav(std::io::Cursor::new(bytes.clone()), true, "x".into()).unwrap();
        assert_eq!(wf.samples.len(), 100);
        assert!(wf.samples.iter().all(|&s| s == 0.0));
        let left = decode_wav(std::io::Cursor::new(bytes), false, "x".into()).unwrap();
        assert!(left.samples.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn full_scale_int_maps_near_one() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let bytes = wav_bytes(spec, |w| w.write_sample(32767i16).unwrap());
        let wf = decode_wav(std::io::Cursor::new(bytes), true, "x".into()).unwrap();
        let oracle = 32767.0f64 / 32768.0;
        assert!((wf.samples[0] as f64 - oracle).abs() < 1e-7);
        assert!((0.999..=1.0).contains(&(wf.samples[0] as f64)));
    }

    #[test]
    fn rejects_zero_length_and_bad_encodings() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let empty = wav_bytes(spec, |_| {});
        assert!(matches!(
            decode_wav(std::io::Cursor::new(empty), true, "x".into()),
            Err(Error::EmptyAudio)
        ));
        let spec24 = hound::WavSpec {
            bits_per_sample: 24,
            ..spec
        };
        let b24 = wav_bytes(spec24, |w| w.write_sample(5i32).unwrap());
        assert!(matches!(
            decode_wav(std::io::Cursor::new(b24), true, "x".into()),
            Err(Error::UnsupportedEncoding(_))
        ));
        assert!(decode_wav(std::io::Cursor::new(b"not a wav".to_vec()), true, "x".into()).is_err());
    }

    #[test]
    fn segmentation_counts() {
        let sr = 100;
        let starts = |secs: f64| -> Vec<f64> {
            segment_clips(&tone(secs, sr), 10.0)
                .unwrap()
                .iter()
                .map(|c| c.start)
                .collect()
        };
        assert_eq!(starts(35.0), vec![0.0, 10.0, 20.0]);
        assert_eq!(starts(20.0).len(), 2);
        assert!(starts(9.0).is_empty());
        assert!(segment_clips(&tone(5.0, sr), 0.0).is_err());
    }

    #[test]
    fn clips_have_exact_sample_counts() {
        let clips = segment_clips(&tone(31.0, 22050), 10.0).unwrap();
        assert!(clips.iter().all(|c| c.samples.len() == 220500));
        assert_eq!(clips[2].clip_ref(), "song#002");
    }

    #[test]
    fn peak_db_cases() {
        assert_eq!(peak_db(&[0.2, -1.0, 0.3], DEFAULT_DB_FLOOR), 0.0);
        assert!((peak_db(&[0.5], DEFAULT_DB_FLOOR) - 20.0 * 0.5f64.log10()).abs() < 1e-12);
        assert!((peak_db(&[0.5], DEFAULT_DB_FLOOR) + 6.0206).abs() < 1e-3);
        assert_eq!(peak_db(&[0.0; 10], DEFAULT_DB_FLOOR), DEFAULT_DB_FLOOR);
    }

    #[test]
    fn resampling_preserves_duration() {
        let w = tone(2.0, 22050);
        let r = w.resampled(8000);
        assert_eq!(r.sample_rate, 8000);
        assert!((r.duration() - 2.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn segmentation_partitions_prefix(len in 0usize..2000, clip in 1usize..300) {
            let samples: Vec<f32> = (0..len).map(|i| (i as f32 * 0.37).sin()).collect();
            let w = Waveform::new(samples.clone(), 100, "s").unwrap();
            let clips = segment_clips(&w, clip as f64 / 100.0).unwrap();
            let joined: Vec<f32> = clips.iter().flat_map(|c| c.samples.clone()).collect();
            prop_assert_eq!(clips.len(), len / clip);
            prop_assert_eq!(&joined[..], &samples[..clips.len() * clip]);
        }

        #[test]
        fn peak_db_ignores_sign_and_order(mut xs in proptest::collection::vec(-1.0f32..1.0, 1..50)) {
            let base = peak_db(&xs, DEFAULT_DB_FLOOR);
            let neg: Vec<f32> = xs.iter().map(|x| -x).collect();
            prop_assert_eq!(peak_db(&neg, DEFAULT_DB_FLOOR), base);
            xs.reverse();
            xs.rotate_left(1);
            prop_assert_eq!(peak_db(&xs, DEFAULT_DB_FLOOR), base);
        }
    }
}
