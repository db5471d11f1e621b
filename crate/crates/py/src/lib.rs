//! Python bindings: pipeline stages, trained models and the evaluation
//! metrics.

use std::path::PathBuf;

use lyricmuse_core::audio::{load_waveform, mel_spectrogram, segment_clips, MelConfig, SpecNormalizer};
use lyricmuse_core::corpus::{self, Vocabulary};
use lyricmuse_core::eval;
use lyricmuse_core::pipeline::{self, GenerateOptions, RunLayout};
use lyricmuse_core::text_vae::GenerationRequest;
use lyricmuse_core::{spec_vae, text_vae, Error};
use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

create_exception!(lyricmuse, LyricmuseError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::InvalidConfig(_)
        | Error::Json(_)
        | Error::ShapeMismatch { .. }
        | Error::EmptyInput(_)
        | Error::Vocab(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => LyricmuseError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| LyricmuseError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Run configuration; `preset` is "default" or "compact", overrides are
/// `dotted.key=value` strings.
#[pyclass(name = "RunConfig", module = "lyricmuse", from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: pipeline::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (preset = "default", overrides = Vec::new(), path = None))]
    fn new(preset: &str, overrides: Vec<String>, path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match (path, preset) {
            (Some(p), _) => pipeline::RunConfig::load(Some(&p), &overrides),
            (None, "default" | "compact") => {
                let base = if preset == "compact" {
                    pipeline::RunConfig::compact()
                } else {
                    pipeline::RunConfig::default()
                };
                let text = serde_json::to_string(&base).map_err(Error::from).map_err(py_err)?;
                pipeline::RunConfig::from_json(Some(&text), &overrides)
            }
            (None, other) => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        }
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn clip_length(&self) -> f64 {
        self.inner.clip_length
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| LyricmuseError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, clip_length={})", self.inner.seed, self.inner.clip_length)
    }
}

/// Pipeline stages rooted at one run directory.
#[pyclass(name = "Pipeline", module = "lyricmuse")]
pub struct PyPipeline {
    config: pipeline::RunConfig,
    layout: RunLayout,
}

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(out: PathBuf, config: PyRunConfig) -> Self {
        Self {
            config: config.inner,
            layout: RunLayout::new(out),
        }
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.layout.root.clone()
    }

    /// Returns the number of songs written.
    fn synth_data(&self, py: Python<'_>) -> PyResult<usize> {
        let d = py.detach(|| pipeline::synth_data(&self.config, &self.layout.data())).map_err(py_err)?;
        Ok(d.songs.len())
    }

    #[pyo3(signature = (data_dir = None))]
    fn preprocess(&self, py: Python<'_>, data_dir: Option<PathBuf>) -> PyResult<()> {
        let data = data_dir.unwrap_or_else(|| self.layout.data());
        py.detach(|| pipeline::preprocess(&self.config, &data, &self.layout.preprocess()))
            .map_err(py_err)
    }

    /// Returns per-epoch `(recon, kl)`.
    fn train_spec_vae(&self, py: Python<'_>) -> PyResult<Vec<(f64, f64)>> {
        let m = py
            .detach(|| pipeline::train_spec_vae_stage(&self.config, &self.layout.preprocess(), &self.layout.spec_vae()))
            .map_err(py_err)?;
        Ok(m.iter().map(|e| (e.recon, e.kl)).collect())
    }

    /// Returns per-epoch `(recon, kl)`. The spectrogram checkpoint defaults to
    /// this run's.
    #[pyo3(signature = (spec_checkpoint = None))]
    fn train_text_vae(&self, py: Python<'_>, spec_checkpoint: Option<PathBuf>) -> PyResult<Vec<(f64, f64)>> {
        let spec = spec_checkpoint.unwrap_or_else(|| self.layout.spec_vae());
        let m = py
            .detach(|| {
                pipeline::train_text_vae_stage(
                    &self.config,
                    &self.layout.preprocess(),
                    Some(&spec),
                    &self.layout.text_vae(),
                )
            })
            .map_err(py_err)?;
        Ok(m.iter().map(|e| (e.recon, e.kl)).collect())
    }

    /// Lines per clip reference.
    #[pyo3(signature = (clips = None, n_lines = None, temperature = None, seed = None))]
    fn generate(
        &self,
        py: Python<'_>,
        clips: Option<Vec<String>>,
        n_lines: Option<usize>,
        temperature: Option<f64>,
        seed: Option<u64>,
    ) -> PyResult<std::collections::BTreeMap<String, Vec<String>>> {
        let opts = GenerateOptions { clips, n_lines, temperature, seed };
        let l = &self.layout;
        py.detach(|| pipeline::generate(&self.config, &l.preprocess(), &l.spec_vae(), &l.text_vae(), &l.generate(), &opts))
            .map_err(py_err)
    }

    /// Evaluation summary as a dict.
    fn evaluate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let l = &self.layout;
        let s = py
            .detach(|| pipeline::evaluate(&self.config, &l.preprocess(), &l.spec_vae(), &l.generate(), &l.evaluate()))
            .map_err(py_err)?;
        json_to_py(py, &s)
    }

    fn run_all(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = py.detach(|| pipeline::run_all(&self.config, &self.layout)).map_err(py_err)?;
        json_to_py(py, &s)
    }
}

/// Trained spectrogram VAE with its MEL settings and normalizer.
#[pyclass(name = "SpecVae", module = "lyricmuse", frozen)]
pub struct PySpecVae {
    model: spec_vae::SpecVae,
    mel: MelConfig,
    norm: SpecNormalizer,
}

#[pymethods]
impl PySpecVae {
    #[staticmethod]
    fn load(checkpoint_dir: PathBuf) -> PyResult<Self> {
        let (model, mel, norm, _) = spec_vae::SpecVae::load(&checkpoint_dir).map_err(py_err)?;
        Ok(Self { model, mel, norm })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    /// `(n_mels, n_frames)` expected by the encoder.
    #[getter]
    fn input_shape(&self) -> (usize, usize) {
        self.model.config.input_shape
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.mel.sample_rate
    }

    /// Posterior `(mu, sigma)` of a normalized spectrogram given as rows.
    fn encode(&self, spectrogram: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let rows = spectrogram.len();
        let cols = spectrogram.first().map_or(0, Vec::len);
        if spectrogram.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err("spectrogram rows differ in length"));
        }
        let flat: Vec<f64> = spectrogram.into_iter().flatten().collect();
        let s = Array2::from_shape_vec((rows, cols), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let g = self.model.encode(&s).map_err(py_err)?;
        Ok((g.mu, g.sigma))
    }

    /// Posterior means of each full clip of a WAV file.
    fn embed_wav(&self, py: Python<'_>, path: PathBuf, clip_length: f64) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| -> lyricmuse_core::Result<Vec<Vec<f64>>> {
            let mut w = load_waveform(&path, true)?;
            if w.sample_rate != self.mel.sample_rate {
                w = w.resampled(self.mel.sample_rate);
            }
            segment_clips(&w, clip_length)?
                .iter()
                .map(|c| {
                    let s = mel_spectrogram(c, &self.mel)?;
                    Ok(self.model.encode(&self.norm.apply(&s.values))?.mu)
                })
                .collect()
        })
        .map_err(py_err)
    }
}

/// Trained conditioned text VAE with its vocabulary.
#[pyclass(name = "TextVae", module = "lyricmuse", frozen)]
pub struct PyTextVae {
    model: text_vae::TextVae,
    vocab: Vocabulary,
}

#[pymethods]
impl PyTextVae {
    #[staticmethod]
    fn load(checkpoint_dir: PathBuf, vocab_path: PathBuf) -> PyResult<Self> {
        let (model, _) = text_vae::TextVae::load(&checkpoint_dir).map_err(py_err)?;
        let vocab = Vocabulary::load(&vocab_path).map_err(py_err)?;
        Ok(Self { model, vocab })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    #[getter]
    fn cond_dim(&self) -> usize {
        self.model.config.cond_dim
    }

    #[pyo3(signature = (embedding, n_lines = 100, temperature = 1.0, seed = 0, max_len = None))]
    fn generate(
        &self,
        py: Python<'_>,
        embedding: Vec<f64>,
        n_lines: usize,
        temperature: f64,
        seed: u64,
        max_len: Option<usize>,
    ) -> PyResult<Vec<String>> {
        let req = GenerationRequest {
            embedding,
            n_lines,
            temperature,
            max_len: max_len.unwrap_or(self.model.config.max_line_len),
            seed,
        };
        py.detach(|| self.model.generate_lines(&req, &self.vocab)).map_err(py_err)
    }
}

/// Extrapolated rank-biased overlap of two word rankings.
#[pyfunction]
#[pyo3(signature = (s, t, p = eval::DEFAULT_PERSISTENCE, depth = eval::DEFAULT_DEPTH))]
fn rbo(s: Vec<String>, t: Vec<String>, p: f64, depth: usize) -> PyResult<f64> {
    eval::rbo_words(&s, &t, p, depth).map_err(py_err)
}

/// Words ranked by their contribution to KL(generated || background).
#[pyfunction]
#[pyo3(signature = (generated, background, smoothing = eval::DEFAULT_SMOOTHING))]
fn word_kl(generated: Vec<String>, background: Vec<String>, smoothing: f64) -> PyResult<Vec<(String, f64)>> {
    Ok(eval::word_kl(&generated, &background, smoothing)
        .map_err(py_err)?
        .items()
        .to_vec())
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::cosine_similarity(&a, &b).map_err(py_err)
}

/// Welch two-sample t-test: `(t, df, p_value)`.
#[pyfunction]
fn welch_ttest(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let t = eval::ttest_peak_db(&a, &b).map_err(py_err)?;
    Ok((t.t, t.df, t.p_value))
}

/// Lowercased word tokens of a lyric line.
#[pyfunction]
fn normalize_line(line: &str) -> Vec<String> {
    corpus::normalize(line)
}

#[pymodule]
pub fn lyricmuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LyricmuseError", m.py().get_type::<LyricmuseError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PySpecVae>()?;
    m.add_class::<PyTextVae>()?;
    m.add_function(wrap_pyfunction!(rbo, m)?)?;
    m.add_function(wrap_pyfunction!(word_kl, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(welch_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_line, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
