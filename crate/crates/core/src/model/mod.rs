//! The networks and their assembly into one model over a [`ParamStore`].

mod config;
mod embedder;
mod sketch;
mod unet;
mod vae;

pub use config::ModelConfig;
pub use embedder::{EmbeddingSet, Embedder};
pub use sketch::SketchEncoder;
pub use unet::{temb_dim, CrossAttnBlock, EncoderOutput, ResBlock, SplitInputs, Unet, UnetBuilders, UnetEncoder};
pub use vae::{Vae, VaeOutput};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::injection::InjectionBundle;
use crate::params::{Group, GroupSet, ParamStore};
use crate::sampler::Denoiser;
use crate::schedule::NoiseSchedule;

/// Parameter-name prefix of the U-Net encoder, copied into the auxiliary encoders.
pub const UNET_ENCODER_PREFIX: &str = "unet.encoder";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vae: Vae,
    pub embedder: Embedder,
    pub sketch_encoder: SketchEncoder,
    pub unet: Unet,
    pub bg_encoder: UnetEncoder,
    pub style_encoder: UnetEncoder,
    pub schedule: NoiseSchedule,
    dtype: DType,
    device: Device,
}

/// Conditioning for one denoiser call.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub sketch: Vec<Tensor>,
    /// `(B, n, d)` local tokens; zeros for the null branch.
    pub tokens: Tensor,
    pub bundle: Option<InjectionBundle>,
}

impl Conditioning {
    /// Same sketch, zero tokens, no injections.
    pub fn null(&self) -> Result<Conditioning> {
        Ok(Conditioning { sketch: self.sketch.clone(), tokens: self.tokens.zeros_like()?, bundle: None })
    }
}

impl Model {
    /// Builds every network, creating missing parameters from the store's
    /// seed. Parameters outside `trainable` are detached.
    pub fn build(store: &ParamStore, config: &ModelConfig, trainable: GroupSet) -> Result<Model> {
        config.validate()?;
        let b = |g| store.builder(g, trainable);
        let unet = Unet::new(
            &UnetBuilders {
                unet: b(Group::Unet),
                lora: b(Group::LoraSplitAttn),
                bg_injection: b(Group::BgInjection),
                style_injection: b(Group::StyleInjection),
            },
            config,
        )?;
        Ok(Model {
            vae: Vae::new(&b(Group::Vae), config)?,
            embedder: Embedder::new(&b(Group::Embedder), config)?,
            sketch_encoder: SketchEncoder::new(&b(Group::SketchEncoder), config)?,
            unet,
            bg_encoder: UnetEncoder::new(&b(Group::BgEncoder), None, config)?,
            style_encoder: UnetEncoder::new(&b(Group::StyleEncoder), None, config)?,
            schedule: config.schedule()?,
            config: config.clone(),
            dtype: store.dtype(),
            device: store.device().clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Background branch: per-level features of the auxiliary encoder run on
    /// the latent of the bleached reference, with its tokens as context.
    pub fn encode_background(&self, z_ref_bg: &Tensor, emb: &EmbeddingSet) -> Result<Vec<Tensor>> {
        let t = vec![0; z_ref_bg.dim(0)?];
        Ok(self.bg_encoder.forward(z_ref_bg, &t, None, &emb.local, None)?.skips)
    }

    /// Style branch: deepest features of the style encoder on the reference latent.
    pub fn encode_style(&self, z_ref: &Tensor, emb: &EmbeddingSet) -> Result<Tensor> {
        let t = vec![0; z_ref.dim(0)?];
        let mut skips = self.style_encoder.forward(z_ref, &t, None, &emb.local, None)?.skips;
        skips.pop().ok_or_else(|| Error::shape("style encoder produced no features"))
    }

    pub fn predict_eps(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let latent = self.config.latent_size();
        let (_, h, w, c) = z_t.dims4()?;
        if h != latent || w != latent || c != self.config.latent_channels {
            return Err(Error::shape(format!("latent {:?} does not match config", z_t.dims())));
        }
        self.unet.forward(z_t, t, &cond.sketch, &cond.tokens, cond.bundle.as_ref())
    }
}

impl Denoiser for Model {
    type Cond = Conditioning;
    fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        let ts = vec![t; z_t.dim(0)?];
        Model::predict_eps(self, z_t, &ts, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::seeded_normal;
    use candle_core::{DType, Device};

    fn tiny() -> (ParamStore, Model) {
        let store = ParamStore::new(DType::F32, Device::Cpu, 11);
        let m = Model::build(&store, &ModelConfig::tiny(), GroupSet::EMPTY).unwrap();
        (store, m)
    }

    fn cond(m: &Model, batch: usize, seed: u64) -> Conditioning {
        let cfg = &m.config;
        let sk = seeded_normal(&[batch, cfg.image_size, cfg.image_size, 1], seed, DType::F32, &Device::Cpu).unwrap();
        Conditioning {
            sketch: m.sketch_encoder.forward(&sk).unwrap(),
            tokens: seeded_normal(&[batch, cfg.num_tokens(), cfg.embed_dim], seed + 1, DType::F32, &Device::Cpu).unwrap(),
            bundle: None,
        }
    }

    #[test]
    fn output_matches_latent_shape_and_is_finite() {
        let (_, m) = tiny();
        let z = seeded_normal(&[2, 8, 8, 4], 1, DType::F32, &Device::Cpu).unwrap();
        let e = m.predict_eps(&z, &[3, 50], &cond(&m, 2, 5)).unwrap();
        assert_eq!(e.dims(), z.dims());
        assert!(e.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
        let null = cond(&m, 2, 5).null().unwrap();
        assert!(m.predict_eps(&z, &[3, 50], &null).is_ok());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let (_, m) = tiny();
        let z = seeded_normal(&[2, 8, 8, 4], 1, DType::F32, &Device::Cpu).unwrap();
        let c = cond(&m, 2, 9);
        let e = m.predict_eps(&z, &[10, 60], &c).unwrap();
        let idx = Tensor::new(&[1u32, 0], &Device::Cpu).unwrap();
        let cp = Conditioning {
            sketch: c.sketch.iter().map(|s| s.index_select(&idx, 0).unwrap()).collect(),
            tokens: c.tokens.index_select(&idx, 0).unwrap(),
            bundle: None,
        };
        let ep = m.predict_eps(&z.index_select(&idx, 0).unwrap(), &[60, 10], &cp).unwrap();
        let a = e.index_select(&idx, 0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = ep.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn token_width_is_checked() {
        let (_, m) = tiny();
        let z = seeded_normal(&[1, 8, 8, 4], 1, DType::F32, &Device::Cpu).unwrap();
        let mut c = cond(&m, 1, 2);
        c.tokens = Tensor::zeros((1, 16, 7), DType::F32, &Device::Cpu).unwrap();
        assert!(m.predict_eps(&z, &[0], &c).is_err());
    }
}
