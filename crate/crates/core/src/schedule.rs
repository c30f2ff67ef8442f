//! Noise schedule, forward diffusion, ε-prediction loss and classifier-free
//! guidance.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end` over `timesteps` steps.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Explicit betas; they must lie in `(0, 1)` and be non-decreasing.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("betas must be non-decreasing"));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside [0, {})", self.len())))
    }
}

fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

/// `√ᾱ·z0 + √(1−ᾱ)·ε` with one ᾱ per batch entry.
pub fn diffuse_with_alpha_bars(z0: &Tensor, eps: &Tensor, alpha_bars: &[f64]) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape(format!("diffuse: z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
    }
    if alpha_bars.len() != z0.dim(0)? {
        return Err(Error::shape("diffuse: one alpha_bar per batch entry required"));
    }
    if alpha_bars.iter().all(|&a| a == 1.0) {
        return Ok(z0.clone());
    }
    if alpha_bars.iter().all(|&a| a == 0.0) {
        return Ok(eps.clone());
    }
    let a: Vec<f64> = alpha_bars.iter().map(|a| a.sqrt()).collect();
    let s: Vec<f64> = alpha_bars.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok((z0.broadcast_mul(&per_sample(&a, z0)?)? + eps.broadcast_mul(&per_sample(&s, z0)?)?)?)
}

/// Forward diffusion of a batch, one timestep per entry.
pub fn diffuse(z0: &Tensor, eps: &Tensor, timesteps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    let abs = timesteps.iter().map(|&t| schedule.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    diffuse_with_alpha_bars(z0, eps, &abs)
}

/// Mean squared error over all elements, as a differentiable scalar tensor.
pub fn diffusion_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_hat.dims() != eps.dims() {
        return Err(Error::shape(format!("loss: {:?} vs {:?}", eps_hat.dims(), eps.dims())));
    }
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// `ε_u + g·(ε_c − ε_u)`, returning the conditional (g = 1) or unconditional
/// (g = 0) prediction unchanged.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_uncond.dims() != eps_cond.dims() {
        return Err(Error::shape(format!("cfg: {:?} vs {:?}", eps_uncond.dims(), eps_cond.dims())));
    }
    if !(scale >= 0.0) {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}
