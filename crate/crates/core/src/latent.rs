//! Diagonal Gaussian posteriors shared by both autoencoders.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(μ, σ)` of an approximate posterior `q(z|x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn from_logvar(mu: Vec<f64>, logvar: &[f64]) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::shape(mu.len(), logvar.len()));
        }
        let sigma: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let g = Self { mu, sigma };
        g.check()?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check(&self) -> Result<()> {
        if self.mu.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior parameters".into()));
        }
        if self.sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::NonFinite("posterior sigma underflowed to zero".into()));
        }
        Ok(())
    }

    /// `KL(q || N(0, I)) = 0.5 · Σ(μ² + σ² − 1 − log σ²)`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        kl_standard_normal(&self.mu, &self.sigma)
    }
}

pub fn kl_standard_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(g: &GaussianParams, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return Err(Error::shape(g.dim(), eps.len()));
    }
    Ok(g.mu
        .iter()
        .zip(&g.sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Loss decomposition for one example or one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Linear KL warm-up from 0 to `beta_max` over `warmup_steps` optimizer steps.
pub fn beta_at(step: usize, warmup_steps: usize, beta_max: f64) -> f64 {
    if warmup_steps == 0 {
        beta_max
    } else {
        beta_max * (step as f64 / warmup_steps as f64).min(1.0)
    }
}
