//! Convolutional pyramid turning the sketch into additive features for each
//! U-Net encoder level.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::Conv2d;
use crate::params::Builder;

const STEM_CHANNELS: usize = 32;

#[derive(Debug, Clone)]
pub struct SketchEncoder {
    stem: Vec<Conv2d>,
    down: Vec<Conv2d>,
    out: Vec<Conv2d>,
    image_size: usize,
}

impl SketchEncoder {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut stem = vec![Conv2d::new(&b.pp("stem0"), 1, STEM_CHANNELS / 2, 3, 1)?];
        let mut cin = STEM_CHANNELS / 2;
        for i in 0..cfg.vae_factor.trailing_zeros() as usize {
            stem.push(Conv2d::new(&b.pp(format!("stem{}", i + 1)), cin, STEM_CHANNELS, 3, 2)?);
            cin = STEM_CHANNELS;
        }
        let ch = &cfg.unet_channels;
        let mut down = Vec::new();
        let mut out = Vec::new();
        let mut prev = STEM_CHANNELS;
        for (l, &c) in ch.iter().enumerate() {
            if l > 0 {
                down.push(Conv2d::new(&b.pp(format!("down{l}")), prev, c, 3, 2)?);
            }
            out.push(Conv2d::new(&b.pp(format!("out{l}")), if l == 0 { STEM_CHANNELS } else { c }, c, 3, 1)?);
            prev = if l == 0 { STEM_CHANNELS } else { c };
        }
        Ok(Self { stem, down, out, image_size: cfg.image_size })
    }

    /// `(B, H, W, 1)` sketch in `[0, 1]` → one feature map per level.
    pub fn forward(&self, sketch: &Tensor) -> Result<Vec<Tensor>> {
        let (_, h, w, c) = sketch.dims4()?;
        if h != self.image_size || w != self.image_size || c != 1 {
            return Err(Error::shape(format!("sketch encoder expects (B, {0}, {0}, 1), got {1:?}", self.image_size, sketch.dims())));
        }
        // Lines become positive activations on a zero background.
        let mut h = (1.0 - sketch)?;
        for s in &self.stem {
            h = s.forward(&h)?.silu()?;
        }
        let mut feats = Vec::with_capacity(self.out.len());
        for (l, o) in self.out.iter().enumerate() {
            if l > 0 {
                h = self.down[l - 1].forward(&h)?.silu()?;
            }
            feats.push(o.forward(&h)?);
        }
        Ok(feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, GroupSet, ParamStore};
    use candle_core::{DType, Device};

    #[test]
    fn pyramid_shapes() {
        let cfg = ModelConfig::default();
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let enc = SketchEncoder::new(&store.builder(Group::SketchEncoder, GroupSet::EMPTY), &cfg).unwrap();
        let s = Tensor::ones((2, 64, 64, 1), DType::F32, &Device::Cpu).unwrap();
        let f = enc.forward(&s).unwrap();
        let dims: Vec<_> = f.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 16, 16, 32], vec![2, 8, 8, 64], vec![2, 4, 4, 128]]);
    }
}
