//! Frozen ViT-style image embedder producing a CLS vector and one local
//! token per patch.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::ModelConfig;
use crate::nn::{attention, Linear};
use crate::params::{Builder, Init};

/// Content tokens and a global summary.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    /// `(B, 1, d)`
    pub cls: Tensor,
    /// `(B, n, d)`, patches in raster order.
    pub local: Tensor,
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let c = x.broadcast_sub(&mean)?;
    let var = c.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(c.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
struct Block {
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(b: &Builder, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&b.pp("qkv"), d, 3 * d)?,
            proj: Linear::new(&b.pp("proj"), d, d)?,
            fc1: Linear::new(&b.pp("fc1"), d, 4 * d)?,
            fc2: Linear::new(&b.pp("fc2"), 4 * d, d)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        let qkv = self.qkv.forward(&layer_norm(x)?)?;
        let (q, k, v) = (qkv.narrow(2, 0, d)?, qkv.narrow(2, d, d)?, qkv.narrow(2, 2 * d, d)?);
        let x = (x + self.proj.forward(&attention(&q, &k, &v, self.heads, None)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&layer_norm(&x)?)?.gelu_erf()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedder {
    patch: Linear,
    pos: Tensor,
    cls: Tensor,
    blocks: Vec<Block>,
    grid: usize,
    patch_size: usize,
    image_size: usize,
}

impl Embedder {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size();
        let d = cfg.embed_dim;
        let n = cfg.num_tokens();
        Ok(Self {
            patch: Linear::new(&b.pp("patch"), p * p * 3, d)?,
            pos: b.get("pos", (1, n + 1, d), Init::Normal(0.5))?,
            cls: b.get("cls", (1, 1, d), Init::Normal(1.0))?,
            blocks: (0..cfg.embed_depth)
                .map(|i| Block::new(&b.pp(format!("block{i}")), d, cfg.embed_heads))
                .collect::<Result<_>>()?,
            grid: cfg.embed_grid,
            patch_size: p,
            image_size: cfg.image_size,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Embeds a `(B, H, W, 3)` batch with values in `[0, 1]`.
    pub fn embed(&self, x: &Tensor) -> Result<EmbeddingSet> {
        let (b, h, w, c) = x.dims4()?;
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(Error::shape(format!(
                "embedder expects (B, {s}, {s}, 3), got {:?}",
                x.dims(),
                s = self.image_size
            )));
        }
        let (g, p) = (self.grid, self.patch_size);
        let patches = ((x * 2.0)? - 1.0)?
            .reshape((b, g, p, g, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, g * g, p * p * 3))?;
        let tokens = self.patch.forward(&patches)?;
        let d = tokens.dim(2)?;
        let cls = self.cls.broadcast_as((b, 1, d))?;
        let mut h = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            h = blk.forward(&h)?;
        }
        Ok(EmbeddingSet { cls: h.narrow(1, 0, 1)?, local: h.narrow(1, 1, g * g)? })
    }

    pub fn embed_image(&self, img: &ImageTensor) -> Result<EmbeddingSet> {
        if img.channels() != 3 {
            return Err(Error::shape("embedder expects a 3-channel image"));
        }
        self.embed(&img.to_nhwc(self.pos.dtype(), self.pos.device())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, GroupSet, ParamStore};
    use candle_core::{DType, Device};

    fn build(depth: usize) -> (ParamStore, ModelConfig) {
        let cfg = ModelConfig { embed_depth: depth, ..ModelConfig::tiny() };
        (ParamStore::new(DType::F32, Device::Cpu, 2), cfg)
    }

    #[test]
    fn shapes_and_patch_locality() {
        let (store, cfg) = build(0);
        let e = Embedder::new(&store.builder(Group::Embedder, GroupSet::EMPTY), &cfg).unwrap();
        let a = ImageTensor::filled(3, 32, 32, 0.5);
        let mut b = a.clone();
        // Paint inside patch 0 (top-left 8x8) only.
        for y in 0..8 {
            for x in 0..8 {
                b.set(1, y, x, 0.9);
            }
        }
        let ea = e.embed_image(&a).unwrap();
        let eb = e.embed_image(&b).unwrap();
        assert_eq!(ea.local.dims(), &[1, 16, 16]);
        assert_eq!(ea.cls.dims(), &[1, 1, 16]);
        let la = ea.local.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let lb = eb.local.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(la[0], lb[0]);
        assert_eq!(la[1..], lb[1..]);
    }

    #[test]
    fn trunk_mixes_tokens() {
        let (store, cfg) = build(1);
        let e = Embedder::new(&store.builder(Group::Embedder, GroupSet::EMPTY), &cfg).unwrap();
        let a = ImageTensor::filled(3, 32, 32, 0.5);
        let b = ImageTensor::filled(3, 32, 32, 0.2);
        let ca = e.embed_image(&a).unwrap().cls.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let cb = e.embed_image(&b).unwrap().cls.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(ca, cb);
        assert!(e.embed_image(&ImageTensor::filled(3, 16, 16, 0.0)).is_err());
    }
}
