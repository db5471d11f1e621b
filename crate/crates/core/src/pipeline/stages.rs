use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json, RetrievalPool, RunConfig, RunLayout, StageManifest};
use crate::audio::{
    align_coarse, align_manual, load_spectrograms, load_waveform, mel_spectrogram, read_annotations,
    save_spectrograms, segment_clips, write_wav, AlignedPair, MelConfig, SpecNormalizer, Spectrogram,
};
use crate::checkpoint;
use crate::corpus::synth::{self, SynthSpec};
use crate::corpus::{paired_examples, read_lines_corpus, write_lines_corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{
    self, GeneratedCorpus, RboMatrix, RetrievalItem, RetrievalSummary, TTest, TimelineClip,
};
use crate::seed::fork;
use crate::spec_vae::{self, SpecTrainConfig, SpecVae, SpecVaeConfig};
use crate::text_vae::{self, GenerationRequest, TextExample, TextTrainConfig, TextVae, TextVaeConfig};

pub const DATASET_FILE: &str = "dataset.json";
pub const CLIPS_FILE: &str = "clips.json";
pub const CLASSES_FILE: &str = "classes.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const GENERATED_FILE: &str = "generated.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// One song of an input dataset. Paths are relative to the dataset
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongEntry {
    pub song_id: String,
    pub album_id: String,
    pub artist_id: String,
    /// "train" or "test".
    pub split: String,
    #[serde(default)]
    pub class: Option<String>,
    pub wav: String,
    /// `onset,text` CSV enabling clip-level alignment.
    #[serde(default)]
    pub annotations: Option<String>,
    /// Plain lyric lines for coarse alignment.
    #[serde(default)]
    pub lyrics: Option<String>,
    /// Ground-truth class per clip, for songs built from labelled segments.
    #[serde(default)]
    pub segments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWords {
    pub name: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub songs: Vec<SongEntry>,
    /// Class names in reference order, with their vocabularies when known.
    #[serde(default)]
    pub classes: Vec<ClassWords>,
}

/// Per-clip metadata written by `preprocess`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_ref: String,
    pub song_id: String,
    pub album_id: String,
    pub artist_id: String,
    pub split: String,
    pub class: Option<String>,
    pub start: f64,
    pub peak_db: f64,
    /// Ground-truth segment class, if the song has one.
    pub truth: Option<String>,
}

pub fn load_clips(preprocess_dir: &Path) -> Result<Vec<ClipMeta>> {
    read_json(&preprocess_dir.join(CLIPS_FILE))
}

pub fn load_embeddings(spec_dir: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    read_json(&spec_dir.join(EMBEDDINGS_FILE))
}

fn io_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_lines_file(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Writes the synthetic two-class dataset (train and test splits plus an
/// optional alternating test song) as WAV files, annotation CSVs and lyric
/// files with a `dataset.json` index.
pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let base = SynthSpec {
        songs_per_class: d.train_songs_per_class,
        albums_per_class: d.albums_per_class,
        classes: synth::default_classes(),
        sample_rate: d.sample_rate,
        min_seconds: d.min_seconds,
        max_seconds: d.max_seconds,
        clip_length: cfg.clip_length,
        min_lines_per_clip: d.min_lines_per_clip,
        max_lines_per_clip: d.max_lines_per_clip,
        require_disjoint: true,
        seed: fork(cfg.seed, "synth-data.train"),
        split: "train".into(),
    };
    let test = SynthSpec {
        songs_per_class: d.test_songs_per_class,
        seed: fork(cfg.seed, "synth-data.test"),
        split: "test".into(),
        ..base.clone()
    };
    let mut songs = synth::synthesize_dataset(&base)?;
    if d.test_songs_per_class > 0 {
        songs.extend(synth::synthesize_dataset(&test)?);
    }
    for sub in ["audio", "annotations", "lyrics"] {
        io_dir(&out.join(sub))?;
    }
    let mut entries: Vec<SongEntry> = songs
        .par_iter()
        .map(|song| {
            let id = &song.waveform.song_id;
            let wav = format!("audio/{id}.wav");
            write_wav(&out.join(&wav), &song.waveform.samples, song.waveform.sample_rate)?;
            let lyrics = format!("lyrics/{id}.txt");
            write_lines_file(&out.join(&lyrics), &song.lines)?;
            let annotations = if song.annotations.is_empty() {
                None
            } else {
                let rel = format!("annotations/{id}.csv");
                let mut text = String::from("onset,text\n");
                for a in &song.annotations {
                    text.push_str(&format!("{},{}\n", a.onset, csv_quote(&a.text)));
                }
                let path = out.join(&rel);
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                Some(rel)
            };
            Ok(SongEntry {
                song_id: id.clone(),
                album_id: song.waveform.album_id.clone(),
                artist_id: song.waveform.artist_id.clone(),
                split: if id.starts_with("test-") { "test" } else { "train" }.into(),
                class: Some(song.class.clone()),
                wav,
                annotations,
                lyrics: Some(lyrics),
                segments: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    if !d.alternating_pattern.is_empty() {
        let id = "test-alternating-000";
        let alt = synth::synthesize_alternating(&test, id, &d.alternating_pattern)?;
        let wav = format!("audio/{id}.wav");
        write_wav(&out.join(&wav), &alt.waveform.samples, alt.waveform.sample_rate)?;
        entries.push(SongEntry {
            song_id: id.into(),
            album_id: alt.waveform.album_id.clone(),
            artist_id: alt.waveform.artist_id.clone(),
            split: "test".into(),
            class: None,
            wav,
            annotations: None,
            lyrics: None,
            segments: alt.segments,
        });
    }
    let dataset = Dataset {
        songs: entries,
        classes: base
            .classes
            .iter()
            .map(|c| ClassWords {
                name: c.name.clone(),
                words: c.theme.words().into_iter().collect(),
            })
            .collect(),
    };
    write_json(&out.join(DATASET_FILE), &dataset)?;
    StageManifest::new("synth-data", cfg.seed, cfg).write(out)?;
    Ok(dataset)
}

struct ProcessedSong {
    metas: Vec<ClipMeta>,
    specs: Vec<Spectrogram>,
    pairs: Vec<AlignedPair>,
}

fn process_song(cfg: &RunConfig, data_dir: &Path, entry: &SongEntry) -> Result<ProcessedSong> {
    let mut w = load_waveform(&data_dir.join(&entry.wav), true)?;
    if w.sample_rate != cfg.mel.sample_rate {
        w = w.resampled(cfg.mel.sample_rate);
    }
    w.song_id = entry.song_id.clone();
    let w = w.with_labels(entry.album_id.clone(), entry.artist_id.clone());
    let clips = segment_clips(&w, cfg.clip_length)?;
    let specs = clips
        .iter()
        .map(|c| mel_spectrogram(c, &cfg.mel))
        .collect::<Result<Vec<_>>>()?;
    let metas = clips
        .iter()
        .map(|c| ClipMeta {
            clip_ref: c.clip_ref(),
            song_id: entry.song_id.clone(),
            album_id: entry.album_id.clone(),
            artist_id: entry.artist_id.clone(),
            split: entry.split.clone(),
            class: entry.class.clone(),
            start: c.start,
            peak_db: c.peak_db(),
            truth: entry.segments.get(c.index).cloned(),
        })
        .collect();
    let pairs = if entry.split != "train" || clips.is_empty() {
        Vec::new()
    } else if let Some(ann) = &entry.annotations {
        align_manual(&w, &read_annotations(&data_dir.join(ann))?, &clips)?
    } else if let Some(lyr) = &entry.lyrics {
        let path = data_dir.join(lyr);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        align_coarse(&clips, &lines)?
    } else {
        Vec::new()
    };
    Ok(ProcessedSong { metas, specs, pairs })
}

/// Segments, transforms and aligns every song of a dataset directory;
/// fits the normalizer and vocabulary on the training split.
pub fn preprocess(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let dataset: Dataset = read_json(&data_dir.join(DATASET_FILE))?;
    if dataset.songs.is_empty() {
        return Err(Error::EmptyInput("dataset has no songs"));
    }
    let processed: Vec<ProcessedSong> = dataset
        .songs
        .par_iter()
        .map(|e| process_song(cfg, data_dir, e))
        .collect::<Result<_>>()?;
    let mut metas = Vec::new();
    let mut specs = Vec::new();
    let mut pairs = Vec::new();
    for p in processed {
        metas.extend(p.metas);
        specs.extend(p.specs);
        pairs.extend(p.pairs);
    }
    let train_refs: HashSet<&str> =
        metas.iter().filter(|m| m.split == "train").map(|m| m.clip_ref.as_str()).collect();
    if train_refs.is_empty() {
        return Err(Error::EmptyInput("no training clips"));
    }
    let norm = SpecNormalizer::fit(
        specs.iter().filter(|s| train_refs.contains(s.clip_ref.as_str())),
        cfg.mel.db_floor,
    );
    let normalized: Vec<Spectrogram> = specs
        .par_iter()
        .map(|s| Spectrogram {
            values: norm.apply(&s.values),
            ..s.clone()
        })
        .collect();
    io_dir(out)?;
    save_spectrograms(
        &out.join("spectrograms"),
        normalized
            .iter()
            .zip(&metas)
            .map(|(s, m)| (s, m.song_id.as_str(), m.start)),
    )?;
    let lines: Vec<&String> = pairs.iter().flat_map(|p| &p.lines).collect();
    if lines.is_empty() {
        return Err(Error::EmptyInput("no aligned training lines"));
    }
    let vocab = Vocabulary::build(&lines, cfg.vocab_min_count)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write_lines_corpus(&out.join("corpus"), &pairs)?;
    write_json(&out.join(CLIPS_FILE), &metas)?;
    write_json(&out.join(CLASSES_FILE), &dataset.classes)?;
    write_json(&out.join("normalizer.json"), &norm)?;
    write_json(&out.join("mel.json"), &cfg.mel)?;
    StageManifest::new("preprocess", cfg.seed, cfg).write(out)
}

/// Trains the spectrogram VAE on the training clips, checkpointing after
/// every epoch, then draws one frozen embedding per clip.
pub fn train_spec_vae_stage(cfg: &RunConfig, preprocess_dir: &Path, out: &Path) -> Result<Vec<spec_vae::EpochMetrics>> {
    cfg.validate()?;
    let metas = load_clips(preprocess_dir)?;
    let split: BTreeMap<&str, &str> = metas.iter().map(|m| (m.clip_ref.as_str(), m.split.as_str())).collect();
    let specs = load_spectrograms(&preprocess_dir.join("spectrograms"))?;
    let train: Vec<Array2<f64>> = specs
        .iter()
        .filter(|(r, _, _)| split.get(r.as_str()) == Some(&"train"))
        .map(|(_, _, v)| v.clone())
        .collect();
    let shape = train.first().ok_or(Error::EmptyInput("no training spectrograms"))?.dim();
    let norm: SpecNormalizer = read_json(&preprocess_dir.join("normalizer.json"))?;
    let mel: MelConfig = read_json(&preprocess_dir.join("mel.json"))?;
    let arch = SpecVaeConfig {
        input_shape: shape,
        ..cfg.spec_vae.clone()
    };
    let init_seed = fork(cfg.seed, "spec-vae.init");
    let mut model = SpecVae::new(arch, init_seed)?;
    let train_cfg = SpecTrainConfig {
        seed: fork(cfg.seed, "spec-vae.train"),
        ..cfg.spec_train.clone()
    };
    let ckpt = out.join(CHECKPOINT_DIR);
    let metrics = spec_vae::train_spec_vae(&mut model, &train, &train_cfg, |m, e| {
        m.save(&ckpt, &mel, &norm, init_seed, e.epoch + 1)
    })?;
    if metrics.is_empty() {
        model.save(&ckpt, &mel, &norm, init_seed, 0)?;
    }
    let all: Vec<(String, Array2<f64>)> = specs.into_iter().map(|(r, _, v)| (r, v)).collect();
    let embeddings: BTreeMap<String, Vec<f64>> = model
        .embed_corpus(&all, fork(cfg.seed, "spec-vae.embed"))?
        .into_iter()
        .map(|e| (e.clip_ref, e.z))
        .collect();
    write_json(&out.join(EMBEDDINGS_FILE), &embeddings)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    let mut manifest = StageManifest::new("train-spec-vae", train_cfg.seed, cfg);
    manifest.checkpoints.insert("spec_vae".into(), checkpoint::digest(&ckpt)?);
    manifest.write(out)?;
    Ok(metrics)
}

/// Accepts either the spectrogram stage directory or its checkpoint
/// directory; returns `(stage dir, checkpoint dir)`.
fn resolve_spec_dir(dir: &Path) -> (PathBuf, PathBuf) {
    if dir.join(checkpoint::MANIFEST).exists() {
        let stage = dir.parent().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf());
        (stage, dir.to_path_buf())
    } else {
        (dir.to_path_buf(), dir.join(CHECKPOINT_DIR))
    }
}

/// Trains the text VAE on (line, frozen clip embedding) pairs.
pub fn train_text_vae_stage(
    cfg: &RunConfig,
    preprocess_dir: &Path,
    spec_checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Vec<text_vae::TextEpochMetrics>> {
    cfg.validate()?;
    let spec_dir = spec_checkpoint.ok_or_else(|| {
        Error::InvalidConfig("a spectrogram VAE checkpoint is required: clip embeddings are unavailable without it".into())
    })?;
    let (spec_stage, spec_ckpt) = resolve_spec_dir(spec_dir);
    let embeddings = load_embeddings(&spec_stage)?;
    let vocab = Vocabulary::load(&preprocess_dir.join(VOCAB_FILE))?;
    let records = read_lines_corpus(&preprocess_dir.join("corpus"))?;
    let data: Vec<TextExample> = paired_examples(&records, &vocab, cfg.max_line_len)
        .into_iter()
        .map(|p| {
            let cond = embeddings
                .get(&p.spec_ref)
                .ok_or_else(|| Error::InvalidConfig(format!("no embedding for clip {}", p.spec_ref)))?;
            Ok(TextExample {
                tokens: p.tokens,
                cond: cond.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let cond_dim = data.first().ok_or(Error::EmptyInput("no paired training lines"))?.cond.len();
    let arch = TextVaeConfig {
        vocab_size: vocab.len(),
        embed_dim: cfg.text_vae.embed_dim,
        hidden: cfg.text_vae.hidden,
        latent_dim: cfg.text_vae.latent_dim,
        cond_dim,
        max_line_len: cfg.max_line_len,
    };
    let init_seed = fork(cfg.seed, "text-vae.init");
    let mut model = TextVae::new(arch, init_seed)?;
    let train_cfg = TextTrainConfig {
        seed: fork(cfg.seed, "text-vae.train"),
        ..cfg.text_train.clone()
    };
    let ckpt = out.join(CHECKPOINT_DIR);
    let metrics = text_vae::train_text_vae(&mut model, &data, &train_cfg, |m, e| {
        m.save(&ckpt, init_seed, e.epoch + 1)
    })?;
    if metrics.is_empty() {
        model.save(&ckpt, init_seed, 0)?;
    }
    vocab.save(&out.join(VOCAB_FILE))?;
    write_json(&out.join("metrics.json"), &metrics)?;
    let mut manifest = StageManifest::new("train-text-vae", train_cfg.seed, cfg);
    manifest.checkpoints.insert("spec_vae".into(), checkpoint::digest(&spec_ckpt)?);
    manifest.checkpoints.insert("text_vae".into(), checkpoint::digest(&ckpt)?);
    manifest.write(out)?;
    Ok(metrics)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerateOptions {
    /// Clips to generate for; all test clips when `None`.
    pub clips: Option<Vec<String>>,
    pub n_lines: Option<usize>,
    pub temperature: Option<f64>,
    /// Base seed; each clip uses `fork(base, clip_ref)`.
    pub seed: Option<u64>,
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Generates line batches for clips and writes `generated.json` plus one
/// text file per clip.
pub fn generate(
    cfg: &RunConfig,
    preprocess_dir: &Path,
    spec_dir: &Path,
    text_dir: &Path,
    out: &Path,
    opts: &GenerateOptions,
) -> Result<BTreeMap<String, Vec<String>>> {
    cfg.validate()?;
    let (spec_stage, spec_ckpt) = resolve_spec_dir(spec_dir);
    let embeddings = load_embeddings(&spec_stage)?;
    let text_ckpt = text_dir.join(CHECKPOINT_DIR);
    let (model, _) = TextVae::load(&text_ckpt)?;
    let vocab = Vocabulary::load(&text_dir.join(VOCAB_FILE))?;
    let targets: Vec<String> = match &opts.clips {
        Some(c) => c.clone(),
        None => load_clips(preprocess_dir)?
            .into_iter()
            .filter(|m| m.split == "test")
            .map(|m| m.clip_ref)
            .collect(),
    };
    if targets.is_empty() {
        return Err(Error::EmptyInput("no clips to generate for"));
    }
    let base = opts.seed.unwrap_or_else(|| fork(cfg.seed, "generate"));
    let n_lines = opts.n_lines.unwrap_or(cfg.generate.n_lines);
    let temperature = opts.temperature.unwrap_or(cfg.generate.temperature);
    let results: Vec<(String, Vec<String>)> = targets
        .par_iter()
        .map(|clip| {
            let embedding = embeddings
                .get(clip)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown clip {clip}")))?
                .clone();
            let req = GenerationRequest {
                embedding,
                n_lines,
                temperature,
                max_len: model.config.max_line_len,
                seed: fork(base, clip),
            };
            Ok((clip.clone(), model.generate_lines(&req, &vocab)?))
        })
        .collect::<Result<_>>()?;
    io_dir(&out.join("lines"))?;
    for (clip, lines) in &results {
        write_lines_file(&out.join("lines").join(format!("{}.txt", safe_name(clip))), lines)?;
    }
    let map: BTreeMap<String, Vec<String>> = results.into_iter().collect();
    write_json(&out.join(GENERATED_FILE), &map)?;
    let mut manifest = StageManifest::new("generate", base, cfg);
    manifest.checkpoints.insert("spec_vae".into(), checkpoint::digest(&spec_ckpt)?);
    manifest.checkpoints.insert("text_vae".into(), checkpoint::digest(&text_ckpt)?);
    manifest.write(out)?;
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSummary {
    pub song_id: String,
    pub clips: usize,
    /// Fraction of clips where the larger of (rbo_calm, rbo_intense) names
    /// the ground-truth segment class.
    pub sign_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub retrieval: Vec<RetrievalSummary>,
    pub rbo_within: Option<f64>,
    pub rbo_cross: Option<f64>,
    pub timelines: Vec<TimelineSummary>,
    pub peak_db_ttest: Option<TTest>,
    /// Per generated clip: fraction of tokens from its own class vocabulary.
    pub purity: BTreeMap<String, f64>,
}

/// Retrieval table, RBO matrix, per-clip timelines, peak-dB t-test and
/// token purity.
pub fn evaluate(
    cfg: &RunConfig,
    preprocess_dir: &Path,
    spec_dir: &Path,
    generate_dir: &Path,
    out: &Path,
) -> Result<EvaluationSummary> {
    cfg.validate()?;
    let e = &cfg.eval;
    let metas = load_clips(preprocess_dir)?;
    let classes: Vec<ClassWords> = read_json(&preprocess_dir.join(CLASSES_FILE))?;
    let (spec_stage, spec_ckpt) = resolve_spec_dir(spec_dir);
    let embeddings = load_embeddings(&spec_stage)?;
    let generated: BTreeMap<String, Vec<String>> = read_json(&generate_dir.join(GENERATED_FILE))?;
    io_dir(out)?;

    let labelled: Vec<&ClipMeta> = metas.iter().filter(|m| m.class.is_some()).collect();
    let item = |m: &ClipMeta| -> Result<RetrievalItem> {
        Ok(RetrievalItem {
            clip_ref: m.clip_ref.clone(),
            song_id: m.song_id.clone(),
            album_id: m.album_id.clone(),
            artist_id: m.artist_id.clone(),
            embedding: embeddings
                .get(&m.clip_ref)
                .ok_or_else(|| Error::InvalidConfig(format!("no embedding for clip {}", m.clip_ref)))?
                .clone(),
        })
    };
    let queries: Vec<RetrievalItem> = labelled.iter().map(|m| item(m)).collect::<Result<_>>()?;
    let pool: Vec<RetrievalItem> = labelled
        .iter()
        .filter(|m| match e.retrieval_pool {
            RetrievalPool::All => true,
            RetrievalPool::Train => m.split == "train",
            RetrievalPool::Test => m.split == "test",
        })
        .map(|m| item(m))
        .collect::<Result<_>>()?;
    let retrieval = eval::retrieval_table(&queries, &pool, &e.retrieval_ns)?;
    eval::write_retrieval(&out.join("retrieval.json"), &retrieval)?;

    let by_ref: BTreeMap<&str, &ClipMeta> = metas.iter().map(|m| (m.clip_ref.as_str(), m)).collect();
    let meta_of = |clip: &str| {
        by_ref
            .get(clip)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("generated clip {clip} missing from {CLIPS_FILE}")))
    };

    let mut songs: BTreeMap<String, GeneratedCorpus> = BTreeMap::new();
    for (clip, lines) in &generated {
        let m = meta_of(clip)?;
        if let Some(class) = &m.class {
            songs
                .entry(m.song_id.clone())
                .or_insert_with(|| GeneratedCorpus {
                    name: m.song_id.clone(),
                    label: class.clone(),
                    lines: Vec::new(),
                })
                .lines
                .extend(lines.iter().cloned());
        }
    }
    let songs: Vec<GeneratedCorpus> = songs.into_values().collect();
    let (rbo_within, rbo_cross) = if songs.len() >= 2 {
        let m: RboMatrix = eval::rbo_matrix(&songs, e.smoothing, e.persistence, e.depth)?;
        eval::write_rbo_matrix(&out.join("rbo_matrix.csv"), &m)?;
        let (w, c) = m.within_cross_means();
        (Some(w), Some(c))
    } else {
        (None, None)
    };

    let mut timelines = Vec::new();
    if classes.len() >= 2 {
        let reference = |label: &str| -> Vec<String> {
            generated
                .iter()
                .filter(|(c, _)| by_ref.get(c.as_str()).and_then(|m| m.class.as_deref()) == Some(label))
                .flat_map(|(_, l)| l.iter().cloned())
                .collect()
        };
        let calm = reference(&classes[0].name);
        let intense = reference(&classes[1].name);
        let background: Vec<GeneratedCorpus> = generated
            .iter()
            .map(|(c, l)| GeneratedCorpus {
                name: c.clone(),
                label: String::new(),
                lines: l.clone(),
            })
            .collect();
        let mut traced: BTreeMap<&str, Vec<TimelineClip>> = BTreeMap::new();
        for (clip, lines) in &generated {
            let m = meta_of(clip)?;
            if m.truth.is_some() {
                traced.entry(m.song_id.as_str()).or_default().push(TimelineClip {
                    clip_ref: clip.clone(),
                    start: m.start,
                    peak_db: m.peak_db,
                    lines: lines.clone(),
                });
            }
        }
        if !calm.is_empty() && !intense.is_empty() {
            for (song, clips) in traced {
                let points =
                    eval::clip_timeline(&clips, &background, &calm, &intense, e.smoothing, e.persistence, e.depth)?;
                eval::write_timeline(&out.join(format!("timeline_{}.csv", safe_name(song))), &points)?;
                let truth: BTreeMap<u64, &str> = clips
                    .iter()
                    .filter_map(|c| Some((c.start.to_bits(), meta_of(&c.clip_ref).ok()?.truth.as_deref()?)))
                    .collect();
                let correct = points
                    .iter()
                    .filter(|p| {
                        let predicted = if p.rbo_calm > p.rbo_intense { &classes[0].name } else { &classes[1].name };
                        truth.get(&p.t.to_bits()) == Some(&predicted.as_str())
                    })
                    .count();
                timelines.push(TimelineSummary {
                    song_id: song.to_string(),
                    clips: points.len(),
                    sign_accuracy: (!points.is_empty()).then(|| correct as f64 / points.len() as f64),
                });
            }
        }
    }

    let peak_db_ttest = if classes.len() >= 2 {
        let peaks = |label: &str| -> Vec<f64> {
            labelled
                .iter()
                .filter(|m| m.class.as_deref() == Some(label))
                .map(|m| m.peak_db)
                .collect()
        };
        let t = eval::ttest_peak_db(&peaks(&classes[0].name), &peaks(&classes[1].name))?;
        write_json(&out.join("ttest.json"), &t)?;
        Some(t)
    } else {
        None
    };

    let words: BTreeMap<&str, HashSet<String>> = classes
        .iter()
        .filter(|c| !c.words.is_empty())
        .map(|c| (c.name.as_str(), c.words.iter().cloned().collect()))
        .collect();
    let mut purity = BTreeMap::new();
    for (clip, lines) in &generated {
        let m = meta_of(clip)?;
        if let Some(vocab) = m.class.as_deref().and_then(|c| words.get(c)) {
            if let Some(p) = eval::token_purity(lines, vocab) {
                purity.insert(clip.clone(), p);
            }
        }
    }

    let summary = EvaluationSummary {
        retrieval,
        rbo_within,
        rbo_cross,
        timelines,
        peak_db_ttest,
        purity,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let mut manifest = StageManifest::new("evaluate", cfg.seed, cfg);
    manifest.checkpoints.insert("spec_vae".into(), checkpoint::digest(&spec_ckpt)?);
    manifest.write(out)?;
    Ok(summary)
}

/// Runs every stage into the standard layout.
pub fn run_all(cfg: &RunConfig, layout: &RunLayout) -> Result<EvaluationSummary> {
    synth_data(cfg, &layout.data())?;
    preprocess(cfg, &layout.data(), &layout.preprocess())?;
    train_spec_vae_stage(cfg, &layout.preprocess(), &layout.spec_vae())?;
    train_text_vae_stage(cfg, &layout.preprocess(), Some(&layout.spec_vae()), &layout.text_vae())?;
    generate(
        cfg,
        &layout.preprocess(),
        &layout.spec_vae(),
        &layout.text_vae(),
        &layout.generate(),
        &GenerateOptions::default(),
    )?;
    evaluate(cfg, &layout.preprocess(), &layout.spec_vae(), &layout.generate(), &layout.evaluate())
}

