//! Recurrent text VAE whose decoder is conditioned on a spectrogram
//! embedding.
//!
//! The LSTM encoder maps a line to `q(z_t | x)`. At every decoder step the
//! input is `[embed(x_{i-1}) ⊕ z_t ⊕ z_s]`, and the reconstruction term is
//! `-Σ_i log p(x_i | z_t, z_s, x_1..x_{i-1})`. At inference `z_t` is drawn
//! from the prior while `z_s` comes from the clip.

use std::path::Path;

use ndarray::{Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{self, TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::latent::{self, beta_at, GaussianParams, LossParts};
use crate::nn::params::init_normal;
use crate::nn::{gaussian_kl, Adam, Bound, Linear, Lstm, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seed;

pub const CHECKPOINT_KIND: &str = "text-vae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextVaeConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Dimension of the spectrogram embedding fed to the decoder.
    pub cond_dim: usize,
    pub max_line_len: usize,
}

impl Default for TextVaeConfig {
    fn default() -> Self {
        Self {
            vocab_size: 5,
            embed_dim: 128,
            hidden: 256,
            latent_dim: 64,
            cond_dim: 64,
            max_line_len: corpus::DEFAULT_MAX_LINE_LEN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextVae {
    pub config: TextVaeConfig,
    pub params: ParamStore,
    embedding: ParamId,
    encoder: Lstm,
    head: Linear,
    decoder: Lstm,
    output: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub embedding: Vec<f64>,
    pub n_lines: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_warmup_epochs: usize,
    pub beta_max: f64,
    pub word_dropout: f64,
    /// Fraction of examples held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TextTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            kl_warmup_epochs: 10,
            beta_max: 1.0,
            word_dropout: 0.4,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Per-example means for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub val_recon: Option<f64>,
    pub val_kl: Option<f64>,
    pub beta: f64,
    /// KL fell below the collapse threshold after warm-up.
    pub collapse_warning: bool,
}

/// KL (nats per line) below which a post-warm-up epoch is flagged.
pub const COLLAPSE_KL_THRESHOLD: f64 = 0.1;

/// One training pair: a tokenized line and its frozen clip embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextExample {
    pub tokens: TokenSequence,
    pub cond: Vec<f64>,
}

fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::from_shape_fn(IxDyn(&[rows, cols]), |ix| f(ix[0], ix[1]))
}

impl TextVae {
    pub fn new(config: TextVaeConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < 5 || config.latent_dim == 0 || config.hidden == 0 || config.embed_dim == 0 {
            return Err(Error::InvalidConfig("text VAE dimensions must be positive and vocab ≥ 5".into()));
        }
        if config.max_line_len < 3 {
            return Err(Error::InvalidConfig("max_line_len must be at least 3".into()));
        }
        let mut rng = seed::rng_for(seed, "text_vae.init");
        let mut params = ParamStore::new();
        let embedding = params.add(
            "embedding",
            init_normal(&mut rng, &[config.vocab_size, config.embed_dim], 1, 0.1),
        );
        let encoder = Lstm::new(&mut params, &mut rng, "enc.lstm", config.embed_dim, config.hidden);
        let head = Linear::new(&mut params, &mut rng, "enc.head", config.hidden, 2 * config.latent_dim);
        params.get_mut(head.w).mapv_inplace(|v| v * 0.1);
        let dec_in = config.embed_dim + config.latent_dim + config.cond_dim;
        let decoder = Lstm::new(&mut params, &mut rng, "dec.lstm", dec_in, config.hidden);
        let output = Linear::new(&mut params, &mut rng, "dec.out", config.hidden, config.vocab_size);
        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            head,
            decoder,
            output,
        })
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.decoder.input
    }

    fn check_sequence(&self, x: &TokenSequence) -> Result<()> {
        if x.len() > self.config.max_line_len {
            return Err(Error::Vocab(format!(
                "sequence length {} exceeds {}",
                x.len(),
                self.config.max_line_len
            )));
        }
        if let Some(&bad) = x.ids().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocab(format!("token {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn check_cond(&self, z_s: &[f64]) -> Result<()> {
        if z_s.len() != self.config.cond_dim {
            return Err(Error::shape(self.config.cond_dim, z_s.len()));
        }
        Ok(())
    }

    /// Runs the encoder over padded sequences; returns `(μ, log σ²)`.
    fn encode_vars(&self, tape: &mut Tape, p: &Bound, seqs: &[&[usize]]) -> (Var, Var) {
        let batch = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut state = self.encoder.zero_state(tape, batch);
        for t in 0..steps {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let mask: Vec<f64> = seqs.iter().map(|s| f64::from(u8::from(t < s.len()))).collect();
            let x = tape.gather(p[self.embedding], ids);
            state = self.encoder.masked_step(tape, p, x, state, &mask);
        }
        let out = self.head.forward(tape, p, state.h);
        let d = self.config.latent_dim;
        (tape.slice_cols(out, 0, d), tape.slice_cols(out, d, 2 * d))
    }

    /// Teacher-forced decoder log-probabilities, one `[batch, vocab]` node per
    /// predicted position. `inputs[r]` are the conditioning tokens of row `r`.
    fn decode_vars(&self, tape: &mut Tape, p: &Bound, inputs: &[Vec<usize>], z_t: Var, z_s: Var) -> Vec<Var> {
        let batch = inputs.len();
        let steps = inputs.iter().map(Vec::len).max().unwrap_or(0);
        let mut state = self.decoder.zero_state(tape, batch);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = inputs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let emb = tape.gather(p[self.embedding], ids);
            let x = tape.concat_cols(&[emb, z_t, z_s]);
            state = self.decoder.step(tape, p, x, state);
            let logits = self.output.forward(tape, p, state.h);
            out.push(tape.log_softmax(logits));
        }
        out
    }

    /// Batch objective; returns `(mean total, summed recon, summed kl)`.
    fn loss_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[(&TokenSequence, &[f64])],
        eps: &[Vec<f64>],
        beta: f64,
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> (Var, Var, Var) {
        let n = batch.len();
        let d = self.config.latent_dim;
        let seqs: Vec<&[usize]> = batch.iter().map(|(x, _)| x.ids()).collect();
        let (mu, logvar) = self.encode_vars(tape, p, &seqs);
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let noise = tape.mul_const(sigma, matrix(n, d, |r, c| eps[r][c]));
        let z_t = tape.add(mu, noise);
        let z_s = tape.constant(matrix(n, self.config.cond_dim, |r, c| batch[r].1[c]));

        let mut inputs: Vec<Vec<usize>> = seqs.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
        if let Some((rng, rate)) = dropout {
            for row in &mut inputs {
                for tok in row.iter_mut().skip(1) {
                    if rng.random::<f64>() < rate {
                        *tok = UNK;
                    }
                }
            }
        }
        let logps = self.decode_vars(tape, p, &inputs, z_t, z_s);
        let mut recon_terms = Vec::with_capacity(logps.len());
        for (t, &lp) in logps.iter().enumerate() {
            let picks: Vec<(usize, usize, f64)> = seqs
                .iter()
                .enumerate()
                .filter(|(_, s)| t + 1 < s.len())
                .map(|(r, s)| (r, s[t + 1], -1.0))
                .collect();
            if !picks.is_empty() {
                recon_terms.push(tape.pick_sum(lp, picks));
            }
        }
        let mut recon = recon_terms[0];
        for &term in &recon_terms[1..] {
            recon = tape.add(recon, term);
        }
        let kl = gaussian_kl(tape, mu, logvar);
        let weighted = tape.scale(kl, beta);
        let total = tape.add(recon, weighted);
        let mean = tape.scale(total, 1.0 / n as f64);
        (mean, recon, kl)
    }

    pub fn encode_text(&self, x: &TokenSequence) -> Result<GaussianParams> {
        self.check_sequence(x)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (mu, logvar) = self.encode_vars(&mut tape, &p, &[x.ids()]);
        let mu: Vec<f64> = tape.value(mu).iter().copied().collect();
        let lv: Vec<f64> = tape.value(logvar).iter().copied().collect();
        GaussianParams::from_logvar(mu, &lv)
    }

    /// Per-step log-probabilities `[len(x) - 1, vocab]` for predicting
    /// `x_1 .. EOS`.
    pub fn decode_teacher_forced(&self, x: &TokenSequence, z_t: &[f64], z_s: &[f64]) -> Result<Array2<f64>> {
        self.check_sequence(x)?;
        self.check_cond(z_s)?;
        if z_t.len() != self.config.latent_dim {
            return Err(Error::shape(self.config.latent_dim, z_t.len()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zt = tape.constant(matrix(1, z_t.len(), |_, c| z_t[c]));
        let zs = tape.constant(matrix(1, z_s.len(), |_, c| z_s[c]));
        let inputs = vec![x.ids()[..x.len() - 1].to_vec()];
        let steps = self.decode_vars(&mut tape, &p, &inputs, zt, zs);
        let mut out = Array2::zeros((steps.len(), self.config.vocab_size));
        for (i, v) in steps.iter().enumerate() {
            out.row_mut(i).assign(&tape.value(*v).index_axis(Axis(0), 0));
        }
        Ok(out)
    }

    /// Loss of one (line, clip embedding) pair. Word dropout is applied only
    /// when `dropout` carries a random stream and a positive rate.
    pub fn loss(
        &self,
        x: &TokenSequence,
        z_s: &[f64],
        eps: &[f64],
        beta: f64,
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<LossParts> {
        self.check_sequence(x)?;
        self.check_cond(z_s)?;
        if eps.len() != self.config.latent_dim {
            return Err(Error::shape(self.config.latent_dim, eps.len()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (total, recon, kl) = self.loss_vars(&mut tape, &p, &[(x, z_s)], &[eps.to_vec()], beta, dropout);
        let parts = LossParts {
            total: tape.scalar(total),
            recon: tape.scalar(recon),
            kl: tape.scalar(kl),
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("text VAE loss".into()));
        }
        Ok(parts)
    }

    /// Batch objective on a caller-owned tape with trainable parameters.
    pub fn batch_loss_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[(&TokenSequence, &[f64])],
        eps: &[Vec<f64>],
        beta: f64,
    ) -> Var {
        self.loss_vars(tape, p, batch, eps, beta, None).0
    }

    /// Decodes one line per row of `z_t`, all conditioned on `z_s`.
    ///
    /// Temperature 0 is greedy. PAD, BOS and UNK are never emitted. Each row
    /// stops at EOS or once BOS plus its tokens reach `max_len - 1`.
    pub fn decode_latents(
        &self,
        z_t: &[Vec<f64>],
        z_s: &[f64],
        temperature: f64,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<usize>>> {
        self.check_cond(z_s)?;
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidConfig("temperature must be a finite value ≥ 0".into()));
        }
        let max_len = max_len.min(self.config.max_line_len).max(2);
        let n = z_t.len();
        if let Some(bad) = z_t.iter().find(|z| z.len() != self.config.latent_dim) {
            return Err(Error::shape(self.config.latent_dim, bad.len()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zt = tape.constant(matrix(n, self.config.latent_dim, |r, c| z_t[r][c]));
        let zs = tape.constant(matrix(n, z_s.len(), |_, c| z_s[c]));
        let mut state = self.decoder.zero_state(&mut tape, n);
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        // content tokens allowed before EOS is forced
        let budget = max_len - 2;
        for step in 0..=budget {
            let ids: Vec<usize> = seqs.iter().map(|s| *s.last().unwrap()).collect();
            let emb = tape.gather(p[self.embedding], ids);
            let x = tape.concat_cols(&[emb, zt, zs]);
            state = self.decoder.step(&mut tape, &p, x, state);
            let logits = self.output.forward(&mut tape, &p, state.h);
            let logits = tape.value(logits).clone();
            for r in 0..n {
                if done[r] {
                    continue;
                }
                let row = logits.index_axis(Axis(0), r);
                let tok = if step == budget {
                    EOS
                } else {
                    pick_token(row.as_slice().expect("contiguous row"), temperature, rng)
                };
                seqs[r].push(tok);
                done[r] = tok == EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(seqs)
    }

    /// Draws `z_t ~ N(0, I)` per line and decodes it with the request's clip
    /// embedding. Deterministic given the request seed.
    pub fn generate_lines(&self, req: &GenerationRequest, vocab: &Vocabulary) -> Result<Vec<String>> {
        if req.n_lines == 0 {
            return Err(Error::InvalidConfig("n_lines must be at least 1".into()));
        }
        if req.max_len > self.config.max_line_len {
            return Err(Error::InvalidConfig(format!(
                "max_len {} exceeds model limit {}",
                req.max_len, self.config.max_line_len
            )));
        }
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Vocab(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let mut rng = seed::rng(req.seed);
        let z_t: Vec<Vec<f64>> = (0..req.n_lines)
            .map(|_| latent::standard_normal(&mut rng, self.config.latent_dim))
            .collect();
        let mut lines = Vec::with_capacity(req.n_lines);
        for chunk in z_t.chunks(128) {
            for seq in self.decode_latents(chunk, &req.embedding, req.temperature, req.max_len, &mut rng)? {
                lines.push(corpus::detokenize(&seq, vocab)?);
            }
        }
        Ok(lines)
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        checkpoint::save(
            dir,
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            serde_json::Value::Null,
            seed,
            epoch,
            &self.params,
        )
    }

    pub fn load(dir: &Path) -> Result<(Self, checkpoint::Manifest)> {
        let (manifest, values) = checkpoint::load(dir, CHECKPOINT_KIND)?;
        let config: TextVaeConfig = serde_json::from_value(manifest.architecture.clone())?;
        let mut model = TextVae::new(config, manifest.seed)?;
        model.params.load_named(values).map_err(Error::Checkpoint)?;
        Ok((model, manifest))
    }
}

/// Samples from `softmax(logits / temperature)` restricted to emittable
/// tokens; temperature 0 takes the argmax.
fn pick_token(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let allowed = |i: usize| i != PAD && i != BOS && i != UNK;
    if temperature == 0.0 {
        return (0..logits.len())
            .filter(|&i| allowed(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if logits[b] >= logits[i] => Some(b),
                _ => Some(i),
            })
            .unwrap_or(EOS);
    }
    let max = (0..logits.len())
        .filter(|&i| allowed(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = (0..logits.len())
        .map(|i| if allowed(i) { ((logits[i] - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if r < *w {
                return i;
            }
            r -= w;
        }
    }
    EOS
}

fn split_validation(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = if n >= 10 { ((n as f64) * fraction.clamp(0.0, 0.5)).round() as usize } else { 0 };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Mean per-example `(recon, kl)` with `ε = 0`-free sampling from a fixed
/// stream, no word dropout.
fn evaluate(model: &TextVae, data: &[TextExample], idx: &[usize], batch_size: usize, seed: u64) -> (f64, f64) {
    let mut rng = seed::rng(seed);
    let (mut recon, mut kl) = (0.0, 0.0);
    for chunk in idx.chunks(batch_size) {
        let batch: Vec<(&TokenSequence, &[f64])> =
            chunk.iter().map(|&i| (&data[i].tokens, data[i].cond.as_slice())).collect();
        let eps: Vec<Vec<f64>> = chunk
            .iter()
            .map(|_| latent::standard_normal(&mut rng, model.config.latent_dim))
            .collect();
        let mut tape = Tape::new();
        let p = model.params.bind_frozen(&mut tape);
        let (_, r, k) = model.loss_vars(&mut tape, &p, &batch, &eps, 1.0, None);
        recon += tape.scalar(r);
        kl += tape.scalar(k);
    }
    let n = idx.len().max(1) as f64;
    (recon / n, kl / n)
}

/// Trains on (line, frozen clip embedding) pairs.
pub fn train_text_vae(
    model: &mut TextVae,
    data: &[TextExample],
    cfg: &TextTrainConfig,
    mut on_epoch: impl FnMut(&TextVae, &TextEpochMetrics) -> Result<()>,
) -> Result<Vec<TextEpochMetrics>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("text training set"));
    }
    for ex in data {
        model.check_sequence(&ex.tokens)?;
        model.check_cond(&ex.cond)?;
    }
    let mut rng = seed::rng_for(cfg.seed, "text_vae.train");
    let (mut train_idx, val_idx) = split_validation(data.len(), cfg.validation_fraction, &mut rng);
    let val_seed = seed::fork(cfg.seed, "text_vae.validation");
    let mut opt = Adam::new(&model.params, cfg.lr);
    let batch_size = cfg.batch_size.max(1);
    let batches_per_epoch = train_idx.len().div_ceil(batch_size);
    let warmup = cfg.kl_warmup_epochs * batches_per_epoch;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        let mut beta = beta_at(step, warmup, cfg.beta_max);
        for (b, chunk) in train_idx.chunks(batch_size).enumerate() {
            beta = beta_at(step, warmup, cfg.beta_max);
            let batch: Vec<(&TokenSequence, &[f64])> =
                chunk.iter().map(|&i| (&data[i].tokens, data[i].cond.as_slice())).collect();
            let eps: Vec<Vec<f64>> = chunk
                .iter()
                .map(|_| latent::standard_normal(&mut rng, model.config.latent_dim))
                .collect();
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let dropout = (cfg.word_dropout > 0.0).then_some((&mut rng, cfg.word_dropout));
            let (total, recon, kl) = model.loss_vars(&mut tape, &p, &batch, &eps, beta, dropout);
            let loss = tape.scalar(total);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("text VAE loss at epoch {epoch}, batch {b}")));
            }
            recon_sum += tape.scalar(recon);
            kl_sum += tape.scalar(kl);
            let mut grads = tape.backward(total);
            let grads = model.params.collect_grads(&p, &mut grads);
            opt.step(&mut model.params, grads);
            step += 1;
        }
        let (val_recon, val_kl) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (r, k) = evaluate(model, data, &val_idx, batch_size, val_seed);
            (Some(r), Some(k))
        };
        let n = train_idx.len() as f64;
        let kl = kl_sum / n;
        let metrics = TextEpochMetrics {
            epoch,
            recon: recon_sum / n,
            kl,
            val_recon,
            val_kl,
            beta,
            collapse_warning: epoch >= cfg.kl_warmup_epochs && kl < COLLAPSE_KL_THRESHOLD,
        };
        on_epoch(model, &metrics)?;
        log.push(metrics);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;

    fn tiny(vocab: usize) -> TextVae {
        TextVae::new(
            TextVaeConfig {
                vocab_size: vocab,
                embed_dim: 4,
                hidden: 8,
                latent_dim: 2,
                cond_dim: 2,
                max_line_len: 10,
            },
            1,
        )
        .unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        let mut v = vec![BOS];
        v.extend_from_slice(ids);
        v.push(EOS);
        TokenSequence::new(v, 20).unwrap()
    }

    #[test]
    fn dimensions() {
        let m = tiny(12);
        assert_eq!(m.decoder_input_dim(), 4 + 2 + 2);
        let g = m.encode_text(&seq(&[4, 5, 6])).unwrap();
        assert_eq!(g.dim(), 2);
        assert_eq!(g, m.encode_text(&seq(&[4, 5, 6])).unwrap());
        assert!(m.encode_text(&seq(&[4; 12])).is_err());
    }

    #[test]
    fn teacher_forced_rows_are_distributions() {
        let m = tiny(12);
        let x = seq(&[4, 7, 9]);
        let lp = m.decode_teacher_forced(&x, &[0.2, -0.1], &[1.0, 0.5]).unwrap();
        assert_eq!(lp.dim(), (4, 12));
        for row in lp.rows() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(lp, m.decode_teacher_forced(&x, &[0.2, -0.1], &[1.0, 0.5]).unwrap());
        assert!(m.decode_teacher_forced(&x, &[0.2], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn reconstruction_equals_gold_log_likelihood() {
        let m = tiny(12);
        let x = seq(&[4, 7, 9, 11]);
        let z_s = [0.3, -0.4];
        let eps = [0.0, 0.0];
        let g = m.encode_text(&x).unwrap();
        let lp = m.decode_teacher_forced(&x, &g.mu, &z_s).unwrap();
        let gold: f64 = x.ids()[1..].iter().enumerate().map(|(i, &t)| lp[[i, t]]).sum();
        let parts = m.loss(&x, &z_s, &eps, 0.0, None).unwrap();
        assert!((parts.recon + gold).abs() < 1e-6);
        assert_eq!(parts.total, parts.recon);
        let with_kl = m.loss(&x, &z_s, &eps, 1.0, None).unwrap();
        assert!((with_kl.total - with_kl.recon - with_kl.kl).abs() < 1e-9);
        assert!((with_kl.kl - g.kl_to_standard_normal()).abs() < 1e-9);
    }

    #[test]
    fn uniform_decoder_costs_log_v_per_token() {
        let mut m = tiny(100);
        // zero output layer ⇒ uniform distribution over the vocabulary
        m.params.get_mut(m.output.w).fill(0.0);
        m.params.get_mut(m.output.b).fill(0.0);
        let x = seq(&[10, 20, 30, 40]);
        let parts = m.loss(&x, &[0.0, 0.0], &[0.0, 0.0], 0.0, None).unwrap();
        assert!((parts.recon - 5.0 * 100f64.ln()).abs() < 1e-9);
        assert!((5.0 * 100f64.ln() - 23.026).abs() < 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = tiny(12);
        let xs = [seq(&[4, 5, 6]), seq(&[7, 8]), seq(&[9, 10, 11, 4, 5])];
        let conds = [vec![0.5, -0.2], vec![-1.0, 0.3], vec![0.1, 0.9]];
        let batch: Vec<(&TokenSequence, &[f64])> =
            xs.iter().zip(&conds).map(|(x, c)| (x, c.as_slice())).collect();
        let eps = vec![vec![0.3, -0.5], vec![1.2, 0.1], vec![-0.7, 0.4]];
        let mut rng = seed::rng(3);
        let report = check_gradients(&m.params, 150, 3e-5, &mut rng, |tape, p| {
            m.batch_loss_on_tape(tape, p, &batch, &eps, 0.6)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn word_dropout_only_when_requested() {
        let m = tiny(12);
        let x = seq(&[4, 5, 6, 7, 8]);
        let a = m.loss(&x, &[0.1, 0.2], &[0.0, 0.0], 1.0, None).unwrap();
        let mut rng = seed::rng(1);
        let b = m.loss(&x, &[0.1, 0.2], &[0.0, 0.0], 1.0, Some((&mut rng, 1.0))).unwrap();
        assert_ne!(a.recon, b.recon);
        let mut rng = seed::rng(1);
        let c = m.loss(&x, &[0.1, 0.2], &[0.0, 0.0], 1.0, Some((&mut rng, 0.0))).unwrap();
        assert_eq!(a, c);
    }

    fn toy_vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (0..n - 4).map(|i| format!("w{i}")).collect();
        Vocabulary::build(&[words.join(" ")], 1).unwrap()
    }

    #[test]
    fn generation_contract() {
        let m = tiny(12);
        let vocab = toy_vocab(12);
        let req = GenerationRequest {
            embedding: vec![0.5, -0.5],
            n_lines: 100,
            temperature: 1.0,
            max_len: 10,
            seed: 7,
        };
        let a = m.generate_lines(&req, &vocab).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, m.generate_lines(&req, &vocab).unwrap());
        let b = m.generate_lines(&GenerationRequest { seed: 8, ..req.clone() }, &vocab).unwrap();
        assert_ne!(a, b);
        assert!(a.iter().all(|l| !l.contains("<unk>") && l.split(' ').count() <= 8));
        assert!(m.generate_lines(&GenerationRequest { n_lines: 0, ..req.clone() }, &vocab).is_err());
        assert!(m.generate_lines(&GenerationRequest { max_len: 40, ..req }, &vocab).is_err());
    }

    #[test]
    fn greedy_decoding_is_repeatable_and_well_formed() {
        let m = tiny(12);
        let z = vec![vec![0.4, -1.3]; 3];
        let mut r1 = seed::rng(1);
        let mut r2 = seed::rng(99);
        let a = m.decode_latents(&z, &[0.2, 0.2], 0.0, 10, &mut r1).unwrap();
        let b = m.decode_latents(&z, &[0.2, 0.2], 0.0, 10, &mut r2).unwrap();
        assert_eq!(a, b);
        let sampled = m.decode_latents(&vec![vec![0.0, 0.0]; 50], &[1.0, -1.0], 1.5, 6, &mut r1).unwrap();
        for s in a.iter().chain(&sampled) {
            assert_eq!(s[0], BOS);
            assert_eq!(*s.last().unwrap(), EOS);
            assert!(s.len() <= 10);
            assert!(s[1..].iter().all(|&t| t != PAD && t != BOS));
        }
        assert!(sampled.iter().all(|s| s.len() <= 6));
    }

    #[test]
    fn learns_conditioned_lines() {
        // class A uses tokens 4..8, class B 8..12; conditioning separates them
        let mut m = tiny(12);
        let mut data = Vec::new();
        let mut rng = seed::rng(5);
        for i in 0..120 {
            let class = i % 2;
            let base = 4 + 4 * class;
            let len = rng.random_range(2..5);
            let ids: Vec<usize> = (0..len).map(|_| base + rng.random_range(0..4)).collect();
            let cond = if class == 0 { vec![1.0, 0.0] } else { vec![-1.0, 0.0] };
            data.push(TextExample { tokens: seq(&ids), cond });
        }
        let cfg = TextTrainConfig {
            epochs: 40,
            batch_size: 16,
            lr: 1e-2,
            kl_warmup_epochs: 5,
            word_dropout: 0.3,
            seed: 2,
            ..TextTrainConfig::default()
        };
        let log = train_text_vae(&mut m, &data, &cfg, |_, _| Ok(())).unwrap();
        assert!(log.last().unwrap().recon < log[0].recon);
        let z: Vec<Vec<f64>> = (0..40).map(|_| latent::standard_normal(&mut rng, 2)).collect();
        let mut grng = seed::rng(1);
        for (cond, range) in [(vec![1.0, 0.0], 4..8), (vec![-1.0, 0.0], 8..12)] {
            let seqs = m.decode_latents(&z, &cond, 0.5, 10, &mut grng).unwrap();
            let content: Vec<usize> = seqs.iter().flat_map(|s| s[1..s.len() - 1].to_vec()).collect();
            let pure = content.iter().filter(|&&t| range.contains(&t)).count() as f64 / content.len() as f64;
            assert!(pure > 0.9, "purity {pure}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(12);
        m.save(dir.path(), 1, 3).unwrap();
        let (back, manifest) = TextVae::load(dir.path()).unwrap();
        assert_eq!(manifest.epoch, 3);
        assert_eq!(back.config, m.config);
        let x = seq(&[4, 5]);
        let a = m.encode_text(&x).unwrap();
        let b = back.encode_text(&x).unwrap();
        assert!((a.mu[0] - b.mu[0]).abs() < 1e-4);
    }
}
