//! Denoising U-Net with cross-attention to reference tokens and hooks for
//! background injection, style modulation and split attention.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::injection::{
    background_inject, global_average_pool, modulate, split_cross_attention, AttnProjections, BackgroundInjection,
    InjectionBundle, SplitLora, StyleModulation,
};
use crate::model::ModelConfig;
use crate::nn::{attention, timestep_embedding, upsample2x, Conv2d, GroupNorm, Linear};
use crate::params::Builder;

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(b: &Builder, cin: usize, cout: usize, temb_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), cin, groups)?,
            conv1: Conv2d::new(&b.pp("conv1"), cin, cout, 3, 1)?,
            temb: Linear::new(&b.pp("temb"), temb_dim, cout)?,
            norm2: GroupNorm::new(&b.pp("norm2"), cout, groups)?,
            conv2: Conv2d::new(&b.pp("conv2"), cout, cout, 3, 1)?,
            skip: if cin == cout { None } else { Some(Conv2d::new(&b.pp("skip"), cin, cout, 1, 1)?) },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?;
        let h = h.broadcast_add(&t.reshape((b, 1, 1, t.dim(1)?))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

/// Split-attention inputs for one level.
#[derive(Clone, Copy)]
pub struct SplitInputs<'a> {
    /// `(B, h·w, 1)` u8, 1 = foreground query.
    pub query_fg: &'a Tensor,
    pub token_fg: &'a [Vec<bool>],
    pub lora_active: bool,
}

#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    lora: Option<SplitLora>,
}

impl CrossAttnBlock {
    pub fn new(b: &Builder, lora: Option<&Builder>, channels: usize, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            norm: GroupNorm::new(&b.pp("norm"), channels, cfg.norm_groups)?,
            q: Linear::no_bias(&b.pp("q"), channels, channels)?,
            k: Linear::no_bias(&b.pp("k"), d, channels)?,
            v: Linear::no_bias(&b.pp("v"), d, channels)?,
            out: Linear::new(&b.pp("out"), channels, channels)?,
            heads: cfg.attention_heads,
            lora: lora.map(|l| SplitLora::new(l, channels, d, cfg.lora_rank, cfg.lora_alpha)).transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, tokens: &Tensor, split: Option<SplitInputs>) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let xn = self.norm.forward(x)?.reshape((b, h * w, c))?;
        let full = attention(&self.q.forward(&xn)?, &self.k.forward(tokens)?, &self.v.forward(tokens)?, self.heads, None)?;
        let attended = match (split, &self.lora) {
            (Some(s), Some(lora)) => {
                let proj = AttnProjections { q: &self.q, k: &self.k, v: &self.v };
                let sp = split_cross_attention(&xn, tokens, proj, Some(lora), s.query_fg, s.token_fg, s.lora_active, self.heads)?;
                (&full + (sp - &full)?.broadcast_mul(&lora.gate)?)?
            }
            _ => full,
        };
        Ok((x + self.out.forward(&attended)?.reshape((b, h, w, c))?)?)
    }
}

#[derive(Debug, Clone)]
struct EncLevel {
    down: Option<Conv2d>,
    res: ResBlock,
    attn: Option<CrossAttnBlock>,
}

/// Time MLP, input convolution and the downsampling path. Also used, with
/// its own weights, as the background and style encoders.
#[derive(Debug, Clone)]
pub struct UnetEncoder {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    levels: Vec<EncLevel>,
    time_embed_dim: usize,
}

pub struct EncoderOutput {
    pub skips: Vec<Tensor>,
    pub temb: Tensor,
}

pub fn temb_dim(cfg: &ModelConfig) -> usize {
    4 * cfg.unet_channels[0]
}

impl UnetEncoder {
    pub fn new(b: &Builder, lora: Option<&Builder>, cfg: &ModelConfig) -> Result<Self> {
        let ch = &cfg.unet_channels;
        let td = temb_dim(cfg);
        let mut levels = Vec::with_capacity(ch.len());
        for (l, &c) in ch.iter().enumerate() {
            let lb = b.pp(format!("level{l}"));
            let prev = if l == 0 { ch[0] } else { ch[l - 1] };
            levels.push(EncLevel {
                down: if l == 0 { None } else { Some(Conv2d::new(&lb.pp("down"), prev, prev, 3, 2)?) },
                res: ResBlock::new(&lb.pp("res"), prev, c, td, cfg.norm_groups)?,
                attn: if cfg.attention_levels.contains(&l) {
                    let lora_b = lora.map(|x| x.pp(format!("level{l}")));
                    Some(CrossAttnBlock::new(&lb.pp("attn"), lora_b.as_ref(), c, cfg)?)
                } else {
                    None
                },
            });
        }
        Ok(Self {
            time1: Linear::new(&b.pp("time1"), cfg.time_embed_dim, td)?,
            time2: Linear::new(&b.pp("time2"), td, td)?,
            conv_in: Conv2d::new(&b.pp("conv_in"), cfg.latent_channels, ch[0], 3, 1)?,
            levels,
            time_embed_dim: cfg.time_embed_dim,
        })
    }

    pub fn time_embedding(&self, t: &[usize], like: &Tensor) -> Result<Tensor> {
        let e = timestep_embedding(t, self.time_embed_dim, like.dtype(), like.device())?;
        self.time2.forward(&self.time1.forward(&e)?.silu()?)
    }

    pub fn forward(
        &self,
        z: &Tensor,
        t: &[usize],
        sketch: Option<&[Tensor]>,
        tokens: &Tensor,
        split: Option<&[SplitInputs]>,
    ) -> Result<EncoderOutput> {
        if t.len() != z.dim(0)? {
            return Err(Error::shape(format!("{} timesteps for batch {}", t.len(), z.dim(0)?)));
        }
        let temb = self.time_embedding(t, z)?;
        let mut h = self.conv_in.forward(z)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for (l, lvl) in self.levels.iter().enumerate() {
            if let Some(d) = &lvl.down {
                h = d.forward(&h)?;
            }
            h = lvl.res.forward(&h, &temb)?;
            if let Some(s) = sketch {
                h = (h + &s[l])?;
            }
            if let Some(a) = &lvl.attn {
                h = a.forward(&h, tokens, split.map(|s| s[l]))?;
            }
            skips.push(h.clone());
        }
        Ok(EncoderOutput { skips, temb })
    }
}

#[derive(Debug, Clone)]
struct DecLevel {
    res: ResBlock,
    attn: Option<CrossAttnBlock>,
}

/// Builders for the groups whose modules live inside the U-Net graph.
pub struct UnetBuilders<'a> {
    pub unet: Builder<'a>,
    pub lora: Builder<'a>,
    pub bg_injection: Builder<'a>,
    pub style_injection: Builder<'a>,
}

#[derive(Debug, Clone)]
pub struct Unet {
    pub encoder: UnetEncoder,
    mid: ResBlock,
    decoder: Vec<DecLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    bg_injection: Vec<BackgroundInjection>,
    style: Vec<StyleModulation>,
    sizes: Vec<usize>,
    embed_dim: usize,
    /// √(1 − ᾱ_t) per timestep. The network predicts the residual on top of
    /// `√(1 − ᾱ_t)·z_t`, the best linear guess of ε for unit-variance
    /// latents, so at high noise it no longer has to reproduce its input
    /// through the whole stack.
    eps_skip: Vec<f64>,
}

impl Unet {
    pub fn new(b: &UnetBuilders, cfg: &ModelConfig) -> Result<Self> {
        let ch = &cfg.unet_channels;
        let td = temb_dim(cfg);
        let g = cfg.norm_groups;
        let top = *ch.last().expect("validated config");
        let lora_enc = b.lora.pp("encoder");
        let lora_dec = b.lora.pp("decoder");
        let mut decoder = Vec::with_capacity(ch.len());
        for l in 0..ch.len() {
            let db = b.unet.pp(format!("decoder.level{l}"));
            let cin = if l + 1 == ch.len() { top } else { ch[l + 1] };
            decoder.push(DecLevel {
                res: ResBlock::new(&db.pp("res"), cin + ch[l], ch[l], td, g)?,
                attn: if cfg.attention_levels.contains(&l) {
                    Some(CrossAttnBlock::new(&db.pp("attn"), Some(&lora_dec.pp(format!("level{l}"))), ch[l], cfg)?)
                } else {
                    None
                },
            });
        }
        Ok(Self {
            encoder: UnetEncoder::new(&b.unet.pp("encoder"), Some(&lora_enc), cfg)?,
            mid: ResBlock::new(&b.unet.pp("mid"), top, top, td, g)?,
            decoder,
            out_norm: GroupNorm::new(&b.unet.pp("out_norm"), ch[0], g)?,
            out_conv: Conv2d::new(&b.unet.pp("out_conv"), ch[0], cfg.latent_channels, 3, 1)?,
            bg_injection: (0..ch.len())
                .map(|l| BackgroundInjection::new(&b.bg_injection.pp(format!("level{l}")), ch[l], g, cfg.attention_heads))
                .collect::<Result<_>>()?,
            style: (0..ch.len())
                .map(|l| StyleModulation::new(&b.style_injection.pp(format!("level{l}")), top, td, ch[l]))
                .collect::<Result<_>>()?,
            sizes: cfg.level_sizes(),
            embed_dim: cfg.embed_dim,
            eps_skip: cfg.schedule()?.alpha_bars().iter().map(|ab| (1.0 - ab).sqrt()).collect(),
        })
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    /// Predicts ε for `z_t`.
    pub fn forward(
        &self,
        z_t: &Tensor,
        t: &[usize],
        sketch: &[Tensor],
        tokens: &Tensor,
        inj: Option<&InjectionBundle>,
    ) -> Result<Tensor> {
        let batch = z_t.dim(0)?;
        if tokens.dim(D::Minus1)? != self.embed_dim || tokens.dim(0)? != batch {
            return Err(Error::shape(format!("tokens {:?} do not match batch {batch} / width {}", tokens.dims(), self.embed_dim)));
        }
        if sketch.len() != self.levels() {
            return Err(Error::shape(format!("{} sketch feature maps for {} levels", sketch.len(), self.levels())));
        }
        let inj = inj.filter(|b| !b.is_vanilla());
        if let Some(b) = inj {
            b.validate(batch, self.levels())?;
        }

        let query_masks: Option<Vec<Tensor>> = match inj {
            Some(b) if b.split_active() => {
                let m = b.sketch_masks.as_ref().expect("validated");
                Some(
                    m.levels
                        .iter()
                        .zip(&self.sizes)
                        .map(|(lvl, &s)| Ok(lvl.gt(b.thresholds.sketch)?.reshape((batch, s * s, 1))?))
                        .collect::<Result<_>>()?,
                )
            }
            _ => None,
        };
        let split: Option<Vec<SplitInputs>> = match (inj, &query_masks) {
            (Some(b), Some(q)) => {
                let flags = b.token_flags.as_deref().expect("validated");
                Some(q.iter().map(|m| SplitInputs { query_fg: m, token_fg: flags, lora_active: b.lora_active }).collect())
            }
            _ => None,
        };

        let enc = self.encoder.forward(z_t, t, Some(sketch), tokens, split.as_deref())?;
        let temb = &enc.temb;
        let style = match inj.and_then(|b| b.z_style.as_ref()) {
            Some(zs) => Some(global_average_pool(zs)?),
            None => None,
        };
        let mut h = self.mid.forward(enc.skips.last().expect("at least one level"), temb)?;
        for l in (0..self.levels()).rev() {
            let mut skip = enc.skips[l].clone();
            if let Some(b) = inj {
                if let (Some(zbg), Some(masks)) = (&b.z_bg, &b.sketch_masks) {
                    skip = background_inject(&skip, &zbg[l], &masks.levels[l], b.thresholds.sketch, &self.bg_injection[l])?;
                }
            }
            let lvl = &self.decoder[l];
            h = lvl.res.forward(&Tensor::cat(&[&h, &skip], D::Minus1)?, temb)?;
            if let Some(s) = &style {
                let (scale, shift) = self.style[l].project(s, temb)?;
                h = modulate(&h, &scale, &shift)?;
            }
            if let Some(a) = &lvl.attn {
                h = a.forward(&h, tokens, split.as_ref().map(|s| s[l]))?;
            }
            if l > 0 {
                h = upsample2x(&h)?;
            }
        }
        let residual = self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)?;
        let coef = t
            .iter()
            .map(|&ti| self.eps_skip.get(ti).copied().ok_or_else(|| Error::invalid(format!("timestep {ti} outside the schedule"))))
            .collect::<Result<Vec<f64>>>()?;
        let coef = Tensor::from_vec(coef, (batch, 1, 1, 1), z_t.device())?.to_dtype(z_t.dtype())?;
        Ok((residual + z_t.broadcast_mul(&coef)?)?)
    }
}
