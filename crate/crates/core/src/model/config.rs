use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::hex;
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};

/// Architecture hyperparameters. Defaults describe a 64×64 model small
/// enough to train on one CPU core in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Spatial downsampling factor of the autoencoder (a power of two).
    pub vae_factor: usize,
    pub latent_channels: usize,
    pub vae_channels: Vec<usize>,
    /// Tokens per side of the embedder's patch grid.
    pub embed_grid: usize,
    pub embed_dim: usize,
    pub embed_depth: usize,
    pub embed_heads: usize,
    /// Channels per U-Net level; level 0 runs at latent resolution.
    pub unet_channels: Vec<usize>,
    /// U-Net levels that carry cross-attention.
    pub attention_levels: Vec<usize>,
    pub attention_heads: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            vae_factor: 4,
            latent_channels: 4,
            vae_channels: vec![16, 32, 64],
            embed_grid: 4,
            embed_dim: 64,
            embed_depth: 2,
            embed_heads: 4,
            unet_channels: vec![32, 64, 128],
            attention_levels: vec![1, 2],
            attention_heads: 4,
            time_embed_dim: 64,
            norm_groups: 8,
            lora_rank: 4,
            lora_alpha: 4.0,
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ModelConfig {
    /// A tiny variant for fast unit tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            vae_factor: 4,
            latent_channels: 4,
            vae_channels: vec![8, 8, 16],
            embed_grid: 4,
            embed_dim: 16,
            embed_depth: 1,
            embed_heads: 2,
            unet_channels: vec![8, 16],
            attention_levels: vec![0, 1],
            attention_heads: 2,
            time_embed_dim: 16,
            norm_groups: 4,
            lora_rank: 2,
            lora_alpha: 2.0,
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.vae_factor.is_power_of_two() || self.vae_factor < 2 {
            return bad(format!("vae_factor must be a power of two >= 2, got {}", self.vae_factor));
        }
        if self.vae_channels.len() != self.vae_factor.trailing_zeros() as usize + 1 {
            return bad(format!(
                "vae_channels needs {} entries for factor {}",
                self.vae_factor.trailing_zeros() + 1,
                self.vae_factor
            ));
        }
        if self.image_size % self.vae_factor != 0 {
            return bad("image_size must be divisible by vae_factor".into());
        }
        let latent = self.latent_size();
        let levels = self.unet_channels.len();
        if levels == 0 || latent % (1 << (levels - 1)) != 0 {
            return bad(format!("latent size {latent} cannot be halved {} times", levels.saturating_sub(1)));
        }
        if self.embed_grid == 0 || self.image_size % self.embed_grid != 0 {
            return bad("image_size must be divisible by embed_grid".into());
        }
        if self.embed_dim % self.embed_heads != 0 {
            return bad("embed_dim must be divisible by embed_heads".into());
        }
        if let Some(c) = self.unet_channels.iter().find(|c| **c % self.attention_heads != 0) {
            return bad(format!("unet channel count {c} not divisible by attention_heads"));
        }
        if let Some(l) = self.attention_levels.iter().find(|l| **l >= levels) {
            return bad(format!("attention level {l} out of range"));
        }
        if self.time_embed_dim % 2 != 0 || self.lora_rank == 0 {
            return bad("time_embed_dim must be even and lora_rank positive".into());
        }
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.vae_factor
    }

    pub fn num_tokens(&self) -> usize {
        self.embed_grid * self.embed_grid
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / self.embed_grid
    }

    /// Spatial size of each U-Net level.
    pub fn level_sizes(&self) -> Vec<usize> {
        (0..self.unet_channels.len()).map(|l| self.latent_size() >> l).collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().level_sizes(), vec![16, 8, 4]);
        assert_eq!(ModelConfig::default().patch_size(), 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = ModelConfig { vae_factor: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { attention_levels: vec![5], ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { beta_start: 0.5, beta_end: 0.1, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelConfig::default();
        assert_eq!(a.hash(), ModelConfig::default().hash());
        assert_ne!(a.hash(), ModelConfig { lora_rank: 8, ..a.clone() }.hash());
    }
}
