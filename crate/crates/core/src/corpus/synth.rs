//! Deterministic synthetic bimodal dataset: "calm" songs made of quiet
//! low-frequency tones and "intense" songs made of loud wideband noise
//! bursts, each paired with lyric lines drawn from a class-specific grammar
//! over a class-specific vocabulary.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{LineAnnotation, Waveform};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AudioGenerator {
    LowTone,
    NoiseBurst,
}

/// Word lists per grammatical slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    pub nouns: Vec<String>,
    pub adjectives: Vec<String>,
    pub verbs: Vec<String>,
    pub adverbs: Vec<String>,
    pub prepositions: Vec<String>,
}

impl Theme {
    pub fn words(&self) -> BTreeSet<String> {
        [
            &self.nouns,
            &self.adjectives,
            &self.verbs,
            &self.adverbs,
            &self.prepositions,
        ]
        .into_iter()
        .flatten()
        .cloned()
        .collect()
    }

    fn slot(&self, s: Slot) -> &[String] {
        match s {
            Slot::Noun => &self.nouns,
            Slot::Adj => &self.adjectives,
            Slot::Verb => &self.verbs,
            Slot::Adv => &self.adverbs,
            Slot::Prep => &self.prepositions,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Noun,
    Adj,
    Verb,
    Adv,
    Prep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Category label, e.g. "calm".
    pub name: String,
    pub generator: AudioGenerator,
    pub theme: Theme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub songs_per_class: usize,
    pub albums_per_class: usize,
    pub classes: Vec<ClassSpec>,
    pub sample_rate: u32,
    pub min_seconds: f64,
    pub max_seconds: f64,
    /// Window used to lay out annotated lines; matches the clip length.
    pub clip_length: f64,
    pub min_lines_per_clip: usize,
    pub max_lines_per_clip: usize,
    pub require_disjoint: bool,
    pub seed: u64,
    /// Prefix for song ids, e.g. "train" or "test".
    pub split: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            songs_per_class: 40,
            albums_per_class: 2,
            classes: default_classes(),
            sample_rate: 22050,
            min_seconds: 30.0,
            max_seconds: 60.0,
            clip_length: 10.0,
            min_lines_per_clip: 3,
            max_lines_per_clip: 5,
            require_disjoint: true,
            seed: 7,
            split: "train".into(),
        }
    }
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn calm_theme() -> Theme {
    Theme {
        nouns: words(&[
            "river", "moon", "morning", "snow", "shore", "garden", "candle", "meadow", "feather",
            "harbor", "lullaby", "cloud",
        ]),
        adjectives: words(&[
            "quiet", "gentle", "silver", "soft", "pale", "slow", "still", "golden", "tender",
            "drowsy",
        ]),
        verbs: words(&[
            "drift", "sleep", "breathe", "float", "linger", "whisper", "rest", "glow", "sway",
            "dream",
        ]),
        adverbs: words(&["softly", "slowly", "gently", "quietly", "lightly"]),
        prepositions: words(&["beneath", "along", "beside"]),
    }
}

pub fn intense_theme() -> Theme {
    Theme {
        nouns: words(&[
            "fire", "thunder", "steel", "blood", "storm", "engine", "wire", "riot", "machine",
            "glass", "bone", "siren",
        ]),
        adjectives: words(&[
            "burning", "broken", "savage", "electric", "brutal", "wild", "jagged", "restless",
            "violent", "heavy",
        ]),
        verbs: words(&[
            "scream", "burn", "break", "crash", "shatter", "fight", "run", "tear", "strike", "rage",
        ]),
        adverbs: words(&["harder", "faster", "loudly", "fiercely", "endlessly"]),
        prepositions: words(&["through", "against", "into"]),
    }
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "calm".into(),
            generator: AudioGenerator::LowTone,
            theme: calm_theme(),
        },
        ClassSpec {
            name: "intense".into(),
            generator: AudioGenerator::NoiseBurst,
            theme: intense_theme(),
        },
    ]
}

/// One synthetic song with its lyric lines.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSong {
    pub waveform: Waveform,
    pub class: String,
    /// Line onsets; empty for songs that only support coarse alignment.
    pub annotations: Vec<LineAnnotation>,
    pub lines: Vec<String>,
}

/// A song whose fixed-length segments alternate between classes.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternatingSong {
    pub waveform: Waveform,
    /// Class name of each segment in time order.
    pub segments: Vec<String>,
}

fn templates(generator: AudioGenerator) -> &'static [&'static [Slot]] {
    use Slot::*;
    match generator {
        AudioGenerator::LowTone => &[
            &[Adj, Noun, Verb, Adv],
            &[Verb, Prep, Adj, Noun],
            &[Noun, Verb, Adv, Prep, Noun],
            &[Adv, Verb, Adj, Noun],
            &[Adj, Noun, Prep, Adj, Noun],
        ],
        AudioGenerator::NoiseBurst => &[
            &[Verb, Verb, Adv],
            &[Adj, Noun, Verb, Prep, Noun],
            &[Noun, Prep, Adj, Noun],
            &[Verb, Adj, Noun, Adv],
            &[Adj, Adj, Noun, Verb],
        ],
    }
}

/// Samples a line from the class grammar, biased by per-song word weights.
fn sample_line(rng: &mut ChaCha8Rng, class: &ClassSpec, bias: &[f64]) -> String {
    let template = templates(class.generator).choose(rng).expect("non-empty templates");
    template
        .iter()
        .map(|&slot| {
            let options = class.theme.slot(slot);
            let weights: Vec<f64> = options
                .iter()
                .enumerate()
                .map(|(i, _)| bias[i % bias.len()])
                .collect();
            let total: f64 = weights.iter().sum();
            let mut r = rng.random::<f64>() * total;
            let mut pick = options.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            options[pick].clone()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Quiet sum of low sinusoids with slow tremolo.
fn low_tone(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f32> {
    let partials: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=3))
        .map(|_| {
            (
                rng.random_range(55.0..380.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let weight: f64 = partials.iter().map(|p| p.1).sum();
    let level = rng.random_range(0.07..0.16);
    let trem_rate = rng.random_range(0.1..0.5);
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = partials
                .iter()
                .map(|&(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum::<f64>()
                / weight;
            let trem = 0.75 + 0.25 * (std::f64::consts::TAU * trem_rate * t).sin();
            (level * trem * tone) as f32
        })
        .collect()
}

/// Loud wideband noise bursts over a low noise bed, colored by a song-specific
/// one-pole low-pass.
fn noise_burst(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f32> {
    let smoothing = rng.random_range(0.0..0.6);
    let level = rng.random_range(0.65..0.95);
    let mut out = vec![0.0f32; n];
    let mut state = 0.0f64;
    let mut i = 0;
    while i < n {
        let burst = (rng.random_range(0.08..0.4) * sr) as usize;
        let gap = (rng.random_range(0.05..0.3) * sr) as usize;
        let amp = level * rng.random_range(0.8..1.0);
        for k in 0..burst.min(n - i) {
            let white: f64 = rng.random_range(-1.0..1.0);
            state = smoothing * state + (1.0 - smoothing) * white;
            let env = (k as f64 / (0.005 * sr)).min(1.0);
            out[i + k] = (amp * env * state.clamp(-1.0, 1.0)) as f32;
        }
        i += burst;
        for k in 0..gap.min(n.saturating_sub(i)) {
            let white: f64 = rng.random_range(-1.0..1.0);
            out[i + k] = (0.03 * white) as f32;
        }
        i += gap;
    }
    out
}

fn render(generator: AudioGenerator, rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f32> {
    match generator {
        AudioGenerator::LowTone => low_tone(rng, n, sr),
        AudioGenerator::NoiseBurst => noise_burst(rng, n, sr),
    }
}

fn check_disjoint(classes: &[ClassSpec]) -> Result<()> {
    for (i, a) in classes.iter().enumerate() {
        for b in &classes[i + 1..] {
            let shared: Vec<_> = a.theme.words().intersection(&b.theme.words()).cloned().collect();
            if !shared.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "classes {} and {} share words {shared:?}",
                    a.name, b.name
                )));
            }
        }
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.songs_per_class == 0 || self.albums_per_class == 0 {
            return Err(Error::InvalidConfig("need at least one class, song and album".into()));
        }
        if !(self.min_seconds > 0.0 && self.min_seconds <= self.max_seconds) {
            return Err(Error::InvalidConfig("invalid song duration range".into()));
        }
        if self.min_lines_per_clip == 0 || self.min_lines_per_clip > self.max_lines_per_clip {
            return Err(Error::InvalidConfig("invalid lines-per-clip range".into()));
        }
        if self.clip_length <= 0.0 || self.sample_rate == 0 {
            return Err(Error::InvalidConfig("clip length and sample rate must be positive".into()));
        }
        for c in &self.classes {
            let t = &c.theme;
            if [&t.nouns, &t.adjectives, &t.verbs, &t.adverbs, &t.prepositions]
                .iter()
                .any(|l| l.is_empty())
            {
                return Err(Error::InvalidConfig(format!("class {} has an empty word slot", c.name)));
            }
        }
        if self.require_disjoint {
            check_disjoint(&self.classes)?;
        }
        Ok(())
    }
}

/// Generates every song of every class. Songs on the first album of each
/// class carry line onsets; the others only carry their line list.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<Vec<SynthSong>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.songs_per_class).map(move |s| (c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(c, s)| synthesize_song(spec, c, s))
        .collect()
}

fn synthesize_song(spec: &SynthSpec, class_idx: usize, song_idx: usize) -> Result<SynthSong> {
    let class = &spec.classes[class_idx];
    let song_id = format!("{}-{}-{:03}", spec.split, class.name, song_idx);
    let mut rng = seed::rng_for(spec.seed, &song_id);
    let sr = spec.sample_rate as f64;
    let seconds = rng.random_range(spec.min_seconds..=spec.max_seconds);
    let n = (seconds * sr).round() as usize;
    let samples = render(class.generator, &mut rng, n, sr);
    let album = song_idx % spec.albums_per_class;
    let waveform = Waveform::new(samples, spec.sample_rate, song_id)?.with_labels(
        format!("{}-album-{album}", class.name),
        format!("{}-artist", class.name),
    );

    let bias: Vec<f64> = (0..16).map(|_| rng.random_range(0.3..1.7)).collect();
    let windows = (seconds / spec.clip_length).ceil() as usize;
    let mut annotations = Vec::new();
    for w in 0..windows {
        let start = w as f64 * spec.clip_length;
        let span = (seconds - start).min(spec.clip_length);
        let k = rng.random_range(spec.min_lines_per_clip..=spec.max_lines_per_clip);
        for j in 0..k {
            let jitter = rng.random_range(0.0..0.5);
            let onset = start + span * (j as f64 + jitter) / k as f64;
            if onset < seconds {
                annotations.push(LineAnnotation {
                    onset,
                    text: sample_line(&mut rng, class, &bias),
                });
            }
        }
    }
    let lines = annotations.iter().map(|a| a.text.clone()).collect();
    if album != 0 {
        annotations.clear();
    }
    Ok(SynthSong {
        waveform,
        class: class.name.clone(),
        annotations,
        lines,
    })
}

/// A song whose consecutive `clip_length` segments follow `pattern`
/// (indices into `spec.classes`).
pub fn synthesize_alternating(spec: &SynthSpec, song_id: &str, pattern: &[usize]) -> Result<AlternatingSong> {
    spec.validate()?;
    let mut rng = seed::rng_for(spec.seed, song_id);
    let sr = spec.sample_rate as f64;
    let per_segment = (spec.clip_length * sr).round() as usize;
    let mut samples = Vec::with_capacity(per_segment * pattern.len());
    let mut segments = Vec::new();
    for &c in pattern {
        let class = spec
            .classes
            .get(c)
            .ok_or_else(|| Error::InvalidConfig(format!("no class {c}")))?;
        samples.extend(render(class.generator, &mut rng, per_segment, sr));
        segments.push(class.name.clone());
    }
    let waveform = Waveform::new(samples, spec.sample_rate, song_id)?
        .with_labels(format!("{song_id}-album"), "mixed-artist");
    Ok(AlternatingSong { waveform, segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{peak_db, segment_clips, DEFAULT_DB_FLOOR};
    use crate::corpus::normalize;

    fn small() -> SynthSpec {
        SynthSpec {
            songs_per_class: 6,
            sample_rate: 4000,
            seed: 7,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = synthesize_dataset(&small()).unwrap();
        let b = synthesize_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&SynthSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lines_stay_in_class_vocabulary() {
        let spec = small();
        for song in synthesize_dataset(&spec).unwrap() {
            let class = spec.classes.iter().find(|c| c.name == song.class).unwrap();
            let vocab = class.theme.words();
            assert!(!song.lines.is_empty());
            for line in &song.lines {
                assert!(normalize(line).iter().all(|w| vocab.contains(w)), "{line}");
            }
            let secs = song.waveform.duration();
            assert!((30.0..=60.0).contains(&secs));
            assert!(song.annotations.windows(2).all(|w| w[0].onset < w[1].onset));
        }
    }

    #[test]
    fn overlapping_vocabularies_rejected() {
        let mut spec = small();
        spec.classes[1].theme.nouns.push("river".into());
        assert!(synthesize_dataset(&spec).is_err());
        spec.require_disjoint = false;
        assert!(synthesize_dataset(&spec).is_ok());
    }

    #[test]
    fn class_peak_levels_separate() {
        let songs = synthesize_dataset(&small()).unwrap();
        let peaks = |class: &str| -> Vec<f64> {
            songs
                .iter()
                .filter(|s| s.class == class)
                .flat_map(|s| segment_clips(&s.waveform, 10.0).unwrap())
                .map(|c| peak_db(&c.samples, DEFAULT_DB_FLOOR))
                .collect()
        };
        let calm = peaks("calm");
        let intense = peaks("intense");
        let calm_max = calm.iter().cloned().fold(f64::MIN, f64::max);
        let intense_min = intense.iter().cloned().fold(f64::MAX, f64::min);
        assert!(calm_max < intense_min, "{calm_max} vs {intense_min}");
    }

    #[test]
    fn alternating_song_layout() {
        let song = synthesize_alternating(&small(), "alt", &[0, 1, 0, 1]).unwrap();
        assert_eq!(song.segments, vec!["calm", "intense", "calm", "intense"]);
        assert_eq!(song.waveform.samples.len(), 4 * 40000);
    }
}
