//! Small convolutional autoencoder mapping images to a `f`× smaller latent.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::nn::{upsample2x, Conv2d};
use crate::params::{Builder, Init};

const LOGVAR_MIN: f64 = -30.0;
const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct Vae {
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_mid: Conv2d,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    latent_scale: Tensor,
    latent_channels: usize,
}

/// Output of a training pass: reconstruction plus the KL term.
pub struct VaeOutput {
    pub reconstruction: Tensor,
    pub kl: Tensor,
}

impl Vae {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let ch = &cfg.vae_channels;
        let n = ch.len() - 1;
        let top = ch[n];
        let enc_down = (0..n)
            .map(|i| Conv2d::new(&b.pp(format!("encoder.down{i}")), ch[i], ch[i + 1], 3, 2))
            .collect::<Result<_>>()?;
        let dec_up = (0..n)
            .map(|i| Conv2d::new(&b.pp(format!("decoder.up{i}")), ch[n - i], ch[n - i - 1], 3, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            enc_in: Conv2d::new(&b.pp("encoder.conv_in"), 3, ch[0], 3, 1)?,
            enc_down,
            enc_mid: Conv2d::new(&b.pp("encoder.mid"), top, top, 3, 1)?,
            enc_out: Conv2d::new(&b.pp("encoder.conv_out"), top, 2 * cfg.latent_channels, 3, 1)?,
            dec_in: Conv2d::new(&b.pp("decoder.conv_in"), cfg.latent_channels, top, 3, 1)?,
            dec_mid: Conv2d::new(&b.pp("decoder.mid"), top, top, 3, 1)?,
            dec_up,
            dec_out: Conv2d::new(&b.pp("decoder.conv_out"), ch[0], 3, 3, 1)?,
            latent_scale: b.get("latent_scale", 1, Init::Ones)?,
            latent_channels: cfg.latent_channels,
        })
    }

    /// Posterior mean and log-variance of the unscaled latent, images in `[0, 1]`.
    fn moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.enc_in.forward(&((x * 2.0)? - 1.0)?)?.silu()?;
        for d in &self.enc_down {
            h = d.forward(&h)?.silu()?;
        }
        h = self.enc_mid.forward(&h)?.silu()?;
        let out = self.enc_out.forward(&h)?;
        let c = self.latent_channels;
        let mean = out.narrow(D::Minus1, 0, c)?;
        let logvar = out.narrow(D::Minus1, c, c)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mean, logvar))
    }

    fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?.silu()?;
        h = self.dec_mid.forward(&h)?.silu()?;
        for u in &self.dec_up {
            h = u.forward(&upsample2x(&h)?)?.silu()?;
        }
        let y = self.dec_out.forward(&h)?;
        Ok(((y + 1.0)? * 0.5)?)
    }

    /// Deterministic encoding (posterior mean), multiplied by the latent scale.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.moments(x)?;
        Ok(mean.broadcast_mul(&self.latent_scale)?)
    }

    /// Inverse of [`Vae::encode`]; output clamped to `[0, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let z = z.broadcast_div(&self.latent_scale)?;
        Ok(self.decode_raw(&z)?.clamp(0.0, 1.0)?)
    }

    /// Unscaled posterior mean, used to calibrate the latent scale.
    pub fn encode_unscaled(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.moments(x)?.0)
    }

    /// Reparameterized pass for training; `noise` matches the latent shape.
    pub fn forward_train(&self, x: &Tensor, noise: &Tensor) -> Result<VaeOutput> {
        let (mean, logvar) = self.moments(x)?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * noise)?)?;
        let reconstruction = self.decode_raw(&z)?;
        let kl = (((mean.sqr()? + logvar.exp()?)? - 1.0)? - &logvar)?.mean_all()?.affine(0.5, 0.0)?;
        Ok(VaeOutput { reconstruction, kl })
    }

    pub fn latent_scale(&self) -> Result<f64> {
        Ok(self.latent_scale.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, GroupSet, ParamStore};
    use candle_core::{DType, Device};

    #[test]
    fn shapes_round_trip() {
        let cfg = ModelConfig::tiny();
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let vae = Vae::new(&store.builder(Group::Vae, GroupSet::EMPTY), &cfg).unwrap();
        let x = Tensor::ones((2, 32, 32, 3), DType::F32, &Device::Cpu).unwrap();
        let z = vae.encode(&x).unwrap();
        assert_eq!(z.dims(), &[2, 8, 8, 4]);
        let y = vae.decode(&z).unwrap();
        assert_eq!(y.dims(), &[2, 32, 32, 3]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        let noise = Tensor::zeros((2, 8, 8, 4), DType::F32, &Device::Cpu).unwrap();
        let out = vae.forward_train(&x, &noise).unwrap();
        assert!(out.kl.to_scalar::<f32>().unwrap() >= 0.0);
    }
}
