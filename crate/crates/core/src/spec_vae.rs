//! Convolutional VAE over normalized MEL spectrograms.
//!
//! The encoder is a stack of stride-2 convolutions followed by one fully
//! connected head producing `μ` and `log σ²`; the decoder mirrors it with a
//! fully connected layer and transposed convolutions ending in a sigmoid.

use std::path::Path;

use ndarray::{Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, SpecNormalizer};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::latent::{self, beta_at, GaussianParams, LossParts};
use crate::nn::params::{init_normal, zeros};
use crate::nn::{gaussian_kl, Adam, Bound, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seed;

pub const CHECKPOINT_KIND: &str = "spec-vae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecVaeConfig {
    /// `(n_mels, n_frames)` of the input spectrogram.
    pub input_shape: (usize, usize),
    /// Output channels of each encoder stage.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub latent_dim: usize,
    pub leaky_slope: f64,
}

impl Default for SpecVaeConfig {
    fn default() -> Self {
        Self {
            input_shape: (80, 431),
            channels: vec![32, 64, 128, 256],
            kernel: 3,
            latent_dim: 64,
            leaky_slope: 0.2,
        }
    }
}

const STRIDE: usize = 2;

#[derive(Debug, Clone, Copy)]
struct ConvStage {
    w: ParamId,
    b: ParamId,
}

/// Spectrogram VAE parameters and geometry.
#[derive(Debug, Clone)]
pub struct SpecVae {
    pub config: SpecVaeConfig,
    pub params: ParamStore,
    encoder: Vec<ConvStage>,
    head: Linear,
    expand: Linear,
    decoder: Vec<ConvStage>,
    /// Spatial size after each encoder stage, starting with the input.
    sizes: Vec<(usize, usize)>,
}

/// Sampled latent code of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramEmbedding {
    pub clip_ref: String,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_warmup_epochs: usize,
    pub beta_max: f64,
    pub seed: u64,
}

impl Default for SpecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            kl_warmup_epochs: 10,
            beta_max: 1.0,
            seed: 0,
        }
    }
}

/// Per-epoch means over training examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
}

fn out_size(n: usize, k: usize) -> usize {
    crate::nn::tape::conv_out_size(n, k, STRIDE, k / 2)
}

impl SpecVae {
    pub fn new(config: SpecVaeConfig, seed: u64) -> Result<Self> {
        let (h, w) = config.input_shape;
        if config.channels.is_empty() || config.latent_dim == 0 || config.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "need at least one conv stage, an odd kernel and a positive latent size".into(),
            ));
        }
        let k = config.kernel;
        let mut sizes = vec![(h, w)];
        for _ in &config.channels {
            let &(ph, pw) = sizes.last().unwrap();
            if ph < 2 || pw < 2 {
                return Err(Error::InvalidConfig(format!(
                    "input {h}x{w} too small for {} stages",
                    config.channels.len()
                )));
            }
            sizes.push((out_size(ph, k), out_size(pw, k)));
        }
        let mut rng = seed::rng_for(seed, "spec_vae.init");
        let mut params = ParamStore::new();
        let mut encoder = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let fan_in = c_in * k * k;
            let w = params.add(
                format!("enc.conv{i}.weight"),
                init_normal(&mut rng, &[c_out, c_in, k, k], fan_in, 2f64.sqrt()),
            );
            let b = params.add(format!("enc.conv{i}.bias"), zeros(&[c_out]));
            encoder.push(ConvStage { w, b });
            c_in = c_out;
        }
        let &(fh, fw) = sizes.last().unwrap();
        let flat = c_in * fh * fw;
        let head = Linear::new(&mut params, &mut rng, "enc.head", flat, 2 * config.latent_dim);
        // small head so initial posteriors start near the prior
        params.get_mut(head.w).mapv_inplace(|v| v * 0.1);
        let expand = Linear::new(&mut params, &mut rng, "dec.fc", config.latent_dim, flat);
        let mut decoder = Vec::new();
        let n = config.channels.len();
        for i in 0..n {
            let c_in = config.channels[n - 1 - i];
            let c_out = if i + 1 == n { 1 } else { config.channels[n - 2 - i] };
            let w = params.add(
                format!("dec.deconv{i}.weight"),
                init_normal(&mut rng, &[c_in, c_out, k, k], c_in * k * k / 4, 1.0),
            );
            let b = params.add(format!("dec.deconv{i}.bias"), zeros(&[c_out]));
            decoder.push(ConvStage { w, b });
        }
        Ok(Self {
            config,
            params,
            encoder,
            head,
            expand,
            decoder,
            sizes,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_input(&self, s: &Array2<f64>) -> Result<()> {
        if s.dim() != self.config.input_shape {
            return Err(Error::shape(self.config.input_shape, s.dim()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectrogram input".into()));
        }
        Ok(())
    }

    fn batch_tensor(&self, specs: &[&Array2<f64>]) -> Tensor {
        let (h, w) = self.config.input_shape;
        let mut t = Tensor::zeros(IxDyn(&[specs.len(), 1, h, w]));
        for (i, s) in specs.iter().enumerate() {
            t.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(*s);
        }
        t
    }

    /// Returns `(μ, log σ²)`, each `[batch, latent]`.
    fn encode_vars(&self, tape: &mut Tape, p: &Bound, x: Var) -> (Var, Var) {
        let k = self.config.kernel;
        let mut h = x;
        for stage in &self.encoder {
            h = tape.conv2d(h, p[stage.w], p[stage.b], STRIDE, k / 2);
            h = tape.leaky_relu(h, self.config.leaky_slope);
        }
        let batch = tape.value(h).shape()[0];
        let flat: usize = tape.value(h).shape()[1..].iter().product();
        let h = tape.reshape(h, &[batch, flat]);
        let out = self.head.forward(tape, p, h);
        let d = self.config.latent_dim;
        let mu = tape.slice_cols(out, 0, d);
        let logvar = tape.slice_cols(out, d, 2 * d);
        (mu, logvar)
    }

    /// Maps `[batch, latent]` codes to `[batch, 1, h, w]` reconstructions.
    fn decode_vars(&self, tape: &mut Tape, p: &Bound, z: Var) -> Var {
        let k = self.config.kernel;
        let batch = tape.value(z).shape()[0];
        let n = self.encoder.len();
        let c_last = *self.config.channels.last().unwrap();
        let (fh, fw) = self.sizes[n];
        let h = self.expand.forward(tape, p, z);
        let h = tape.leaky_relu(h, self.config.leaky_slope);
        let mut h = tape.reshape(h, &[batch, c_last, fh, fw]);
        for (i, stage) in self.decoder.iter().enumerate() {
            let (ih, iw) = self.sizes[n - i];
            let (th, tw) = self.sizes[n - i - 1];
            let base = |inp: usize| (inp - 1) * STRIDE + k - 2 * (k / 2);
            let out_pad = (th - base(ih), tw - base(iw));
            h = tape.conv_transpose2d(h, p[stage.w], p[stage.b], STRIDE, k / 2, out_pad);
            h = if i + 1 == n {
                tape.sigmoid(h)
            } else {
                tape.leaky_relu(h, self.config.leaky_slope)
            };
        }
        h
    }

    /// Builds the batch loss `Σ_examples(recon + β·kl) / batch` on a tape.
    ///
    /// Returns `(mean total, summed recon, summed kl)`.
    fn loss_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        specs: &[&Array2<f64>],
        eps: &[Vec<f64>],
        beta: f64,
    ) -> (Var, Var, Var) {
        let d = self.config.latent_dim;
        let x = tape.constant(self.batch_tensor(specs));
        let (mu, logvar) = self.encode_vars(tape, p, x);
        let eps_t = Tensor::from_shape_fn(IxDyn(&[specs.len(), d]), |ix| eps[ix[0]][ix[1]]);
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let noise = tape.mul_const(sigma, eps_t);
        let z = tape.add(mu, noise);
        let recon_x = self.decode_vars(tape, p, z);
        let diff = tape.sub(recon_x, x);
        let sq = tape.square(diff);
        let recon = tape.sum(sq);
        let kl = gaussian_kl(tape, mu, logvar);
        let weighted = tape.scale(kl, beta);
        let total = tape.add(recon, weighted);
        let mean = tape.scale(total, 1.0 / specs.len() as f64);
        (mean, recon, kl)
    }

    pub fn encode(&self, s: &Array2<f64>) -> Result<GaussianParams> {
        Ok(self.encode_batch(&[s])?.remove(0))
    }

    pub fn encode_batch(&self, specs: &[&Array2<f64>]) -> Result<Vec<GaussianParams>> {
        for s in specs {
            self.check_input(s)?;
        }
        if specs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(self.batch_tensor(specs));
        let (mu, logvar) = self.encode_vars(&mut tape, &p, x);
        let mu = tape.value(mu);
        let lv = tape.value(logvar);
        (0..specs.len())
            .map(|i| {
                let m: Vec<f64> = mu.index_axis(Axis(0), i).iter().copied().collect();
                let l: Vec<f64> = lv.index_axis(Axis(0), i).iter().copied().collect();
                GaussianParams::from_logvar(m, &l)
            })
            .collect()
    }

    pub fn decode(&self, z: &[f64]) -> Result<Array2<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape(self.config.latent_dim, z.len()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zv = tape.constant(Tensor::from_shape_vec(IxDyn(&[1, z.len()]), z.to_vec()).unwrap());
        let out = self.decode_vars(&mut tape, &p, zv);
        let (h, w) = self.config.input_shape;
        Ok(tape
            .value(out)
            .to_owned()
            .into_shape_with_order((h, w))
            .expect("decoder output matches input shape"))
    }

    /// Loss of a single example for a given noise draw.
    pub fn loss(&self, s: &Array2<f64>, eps: &[f64], beta: f64) -> Result<LossParts> {
        self.check_input(s)?;
        if eps.len() != self.config.latent_dim {
            return Err(Error::shape(self.config.latent_dim, eps.len()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (total, recon, kl) = self.loss_vars(&mut tape, &p, &[s], &[eps.to_vec()], beta);
        let parts = LossParts {
            total: tape.scalar(total),
            recon: tape.scalar(recon),
            kl: tape.scalar(kl),
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("spectrogram VAE loss".into()));
        }
        Ok(parts)
    }

    /// Builds the batch loss on `tape` with trainable parameters; used for
    /// gradient checks.
    pub fn batch_loss_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        specs: &[&Array2<f64>],
        eps: &[Vec<f64>],
        beta: f64,
    ) -> Var {
        self.loss_vars(tape, p, specs, eps, beta).0
    }

    /// One sampled embedding per spectrogram with noise from a seeded stream.
    pub fn embed_corpus(
        &self,
        specs: &[(String, Array2<f64>)],
        seed: u64,
    ) -> Result<Vec<SpectrogramEmbedding>> {
        let mut rng = seed::rng_for(seed, "spec_vae.embed");
        let mut out = Vec::with_capacity(specs.len());
        for chunk in specs.chunks(64) {
            let refs: Vec<&Array2<f64>> = chunk.iter().map(|(_, s)| s).collect();
            for ((clip_ref, _), g) in chunk.iter().zip(self.encode_batch(&refs)?) {
                let eps = latent::standard_normal(&mut rng, self.latent_dim());
                out.push(SpectrogramEmbedding {
                    clip_ref: clip_ref.clone(),
                    z: latent::reparameterize(&g, &eps)?,
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, mel: &MelConfig, norm: &SpecNormalizer, seed: u64, epoch: usize) -> Result<()> {
        checkpoint::save(
            dir,
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            serde_json::json!({ "mel": mel, "normalizer": norm }),
            seed,
            epoch,
            &self.params,
        )
    }

    /// Loads a checkpoint with its MEL settings and normalizer.
    pub fn load(dir: &Path) -> Result<(Self, MelConfig, SpecNormalizer, checkpoint::Manifest)> {
        let (manifest, values) = checkpoint::load(dir, CHECKPOINT_KIND)?;
        let config: SpecVaeConfig = serde_json::from_value(manifest.architecture.clone())?;
        let mel: MelConfig = serde_json::from_value(manifest.extra["mel"].clone())?;
        let norm: SpecNormalizer = serde_json::from_value(manifest.extra["normalizer"].clone())?;
        let mut model = SpecVae::new(config, manifest.seed)?;
        model.params.load_named(values).map_err(Error::Checkpoint)?;
        Ok((model, mel, norm, manifest))
    }
}

/// Trains on normalized spectrograms.
///
/// `on_epoch` runs after every epoch (used to checkpoint); a non-finite batch
/// loss aborts training with an error naming the batch, leaving whatever the
/// callback persisted for the previous epoch intact.
pub fn train_spec_vae(
    model: &mut SpecVae,
    data: &[Array2<f64>],
    cfg: &SpecTrainConfig,
    mut on_epoch: impl FnMut(&SpecVae, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("spectrogram training set"));
    }
    for s in data {
        model.check_input(s)?;
    }
    let mut rng = seed::rng_for(cfg.seed, "spec_vae.train");
    let mut opt = Adam::new(&model.params, cfg.lr);
    let batch_size = cfg.batch_size.max(1);
    let batches_per_epoch = data.len().div_ceil(batch_size);
    let warmup = cfg.kl_warmup_epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        let mut beta = beta_at(step, warmup, cfg.beta_max);
        for (b, idx) in order.chunks(batch_size).enumerate() {
            beta = beta_at(step, warmup, cfg.beta_max);
            let specs: Vec<&Array2<f64>> = idx.iter().map(|&i| &data[i]).collect();
            let eps: Vec<Vec<f64>> = idx
                .iter()
                .map(|_| latent::standard_normal(&mut rng, model.latent_dim()))
                .collect();
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let (total, recon, kl) = model.loss_vars(&mut tape, &p, &specs, &eps, beta);
            let loss = tape.scalar(total);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "spectrogram VAE loss at epoch {epoch}, batch {b}"
                )));
            }
            recon_sum += tape.scalar(recon);
            kl_sum += tape.scalar(kl);
            let mut grads = tape.backward(total);
            let grads = model.params.collect_grads(&p, &mut grads);
            opt.step(&mut model.params, grads);
            step += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            recon: recon_sum / data.len() as f64,
            kl: kl_sum / data.len() as f64,
            beta,
        };
        on_epoch(model, &metrics)?;
        log.push(metrics);
    }
    Ok(log)
}

/// Loss parts computed directly from a reconstruction: summed squared error
/// plus the closed-form KL of `g`.
pub fn loss_from_reconstruction(
    reconstruction: &Array2<f64>,
    target: &Array2<f64>,
    g: &GaussianParams,
    beta: f64,
) -> Result<LossParts> {
    if reconstruction.dim() != target.dim() {
        return Err(Error::shape(target.dim(), reconstruction.dim()));
    }
    let recon = (reconstruction - target).mapv(|v| v * v).sum();
    let kl = g.kl_to_standard_normal();
    Ok(LossParts {
        total: recon + beta * kl,
        recon,
        kl,
    })
}

/// Per-cell mean squared error of reconstructing `s` from its posterior mean.
pub fn reconstruction_mse(model: &SpecVae, s: &Array2<f64>) -> Result<f64> {
    let g = model.encode(s)?;
    let r = model.decode(&g.mu)?;
    Ok((&r - s).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Random spectrogram-like input in `[0, 1]`, for tests and smoke checks.
pub fn random_input<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random::<f64>())
}
