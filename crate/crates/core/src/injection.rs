//! Mask-gated background injection, style modulation and split
//! cross-attention with LoRA adapters.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{attention, key_bias_from_flags, GroupNorm, Linear};
use crate::params::{Builder, Init};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Sketch foreground threshold: mask values strictly above it are foreground.
    pub sketch: f64,
    /// Reference foreground threshold applied to per-patch mask means.
    pub reference: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { sketch: 0.5, reference: 0.5 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sketch", self.sketch), ("reference", self.reference)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} threshold {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Area-average pooling of a one-channel mask to `height × width`.
pub fn downsample_mask(mask: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if mask.channels() != 1 {
        return Err(Error::shape("downsample_mask expects a 1-channel mask"));
    }
    let (h, w) = (mask.height(), mask.width());
    if height == 0 || width == 0 || h % height != 0 || w % width != 0 {
        return Err(Error::invalid(format!("cannot pool {h}x{w} to {height}x{width} by an integer ratio")));
    }
    let (fy, fx) = (h / height, w / width);
    let area = (fy * fx) as f64;
    Ok(ImageTensor::from_fn(1, height, width, |_, y, x| {
        let mut s = 0.0f64;
        for dy in 0..fy {
            for dx in 0..fx {
                s += mask.get(0, y * fy + dy, x * fx + dx) as f64;
            }
        }
        (s / area) as f32
    }))
}

/// Per-level masks as `(B, h_l, w_l, 1)` tensors.
#[derive(Debug, Clone)]
pub struct MaskPyramid {
    pub levels: Vec<Tensor>,
}

impl MaskPyramid {
    pub fn build(masks: &[&ImageTensor], sizes: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let levels = sizes
            .iter()
            .map(|&s| {
                let pooled = masks.iter().map(|m| downsample_mask(m, s, s)).collect::<Result<Vec<_>>>()?;
                ImageTensor::stack_nhwc(&pooled.iter().collect::<Vec<_>>(), dtype, device)
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn batch(&self) -> usize {
        self.levels.first().map_or(0, |t| t.dims()[0])
    }
}

/// Token j is foreground iff the mean mask over its patch exceeds `threshold`.
pub fn token_flags(reference_mask: &ImageTensor, grid: usize, threshold: f64) -> Result<Vec<bool>> {
    let pooled = downsample_mask(reference_mask, grid, grid)?;
    Ok(pooled.data().iter().map(|&m| m as f64 > threshold).collect())
}

/// `up(down(x))·α/r`, with `up` zero-initialized.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    down: Linear,
    up: Linear,
    scale: f64,
}

impl LoraAdapter {
    pub fn new(b: &Builder, din: usize, dout: usize, rank: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            down: Linear::with_init(&b.pp("down"), din, rank, Init::Uniform(1.0 / (din as f64).sqrt()), false)?,
            up: Linear::with_init(&b.pp("up"), rank, dout, Init::Zeros, false)?,
            scale: alpha / rank as f64,
        })
    }

    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.up.forward(&self.down.forward(x)?)? * self.scale)?)
    }
}

/// LoRA adapters for one cross-attention layer plus the scalar that blends
/// the split result into full attention. The blend starts at zero so a
/// freshly added split layer reproduces the layer it wraps.
#[derive(Debug, Clone)]
pub struct SplitLora {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
    pub gate: Tensor,
}

impl SplitLora {
    pub fn new(b: &Builder, channels: usize, token_dim: usize, rank: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            q: LoraAdapter::new(&b.pp("q"), channels, channels, rank, alpha)?,
            k: LoraAdapter::new(&b.pp("k"), token_dim, channels, rank, alpha)?,
            v: LoraAdapter::new(&b.pp("v"), token_dim, channels, rank, alpha)?,
            gate: b.get("gate", 1, Init::Zeros)?,
        })
    }
}

/// Base query/key/value projections of a cross-attention layer.
#[derive(Clone, Copy)]
pub struct AttnProjections<'a> {
    pub q: &'a Linear,
    pub k: &'a Linear,
    pub v: &'a Linear,
}

fn with_fallback(flags: &[Vec<bool>], want: bool) -> Vec<Vec<bool>> {
    flags
        .iter()
        .map(|f| {
            let sel: Vec<bool> = f.iter().map(|&x| x == want).collect();
            if sel.iter().any(|&s| s) { sel } else { vec![true; f.len()] }
        })
        .collect()
}

/// Foreground queries attend to foreground tokens through the base
/// projections; background queries attend to background tokens with LoRA
/// deltas added to q/k/v. An empty token partition falls back to all tokens.
///
/// `x` is `(B, Nq, C)`, `tokens` `(B, n, d)`, `query_fg` `(B, Nq, 1)` u8.
/// Returns attended values before the output projection.
#[allow(clippy::too_many_arguments)]
pub fn split_cross_attention(
    x: &Tensor,
    tokens: &Tensor,
    proj: AttnProjections,
    lora: Option<&SplitLora>,
    query_fg: &Tensor,
    token_fg: &[Vec<bool>],
    lora_active: bool,
    heads: usize,
) -> Result<Tensor> {
    let (b, nq, c) = x.dims3()?;
    let n = tokens.dim(1)?;
    if token_fg.len() != b || token_fg.iter().any(|f| f.len() != n) {
        return Err(Error::shape(format!("token flags must be {b} x {n}")));
    }
    if query_fg.dims() != [b, nq, 1] {
        return Err(Error::shape(format!("query mask {:?} != [{b}, {nq}, 1]", query_fg.dims())));
    }
    let (dt, dev) = (x.dtype(), x.device());
    let fg_bias = key_bias_from_flags(&with_fallback(token_fg, true), dt, dev)?;
    let bg_bias = key_bias_from_flags(&with_fallback(token_fg, false), dt, dev)?;
    let (q, k, v) = (proj.q.forward(x)?, proj.k.forward(tokens)?, proj.v.forward(tokens)?);
    let fg = attention(&q, &k, &v, heads, Some(&fg_bias))?;
    let (qb, kb, vb) = match (lora, lora_active) {
        (Some(l), true) => ((&q + l.q.delta(x)?)?, (&k + l.k.delta(tokens)?)?, (&v + l.v.delta(tokens)?)?),
        _ => (q, k, v),
    };
    let bg = attention(&qb, &kb, &vb, heads, Some(&bg_bias))?;
    Ok(query_fg.broadcast_as((b, nq, c))?.where_cond(&fg, &bg)?)
}

/// The transform `W` of the background gate: one pre-norm cross-attention
/// block from skip features to background features, residual, with a
/// zero-initialized output projection.
#[derive(Debug, Clone)]
pub struct BackgroundInjection {
    norm_x: GroupNorm,
    norm_bg: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl BackgroundInjection {
    pub fn new(b: &Builder, channels: usize, groups: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_x: GroupNorm::new(&b.pp("norm_x"), channels, groups)?,
            norm_bg: GroupNorm::new(&b.pp("norm_bg"), channels, groups)?,
            q: Linear::no_bias(&b.pp("q"), channels, channels)?,
            k: Linear::no_bias(&b.pp("k"), channels, channels)?,
            v: Linear::no_bias(&b.pp("v"), channels, channels)?,
            out: Linear::zeros(&b.pp("out"), channels, channels)?,
            heads,
        })
    }

    /// `W(z_skip, z_bg)` for every position.
    pub fn transform(&self, skip: &Tensor, bg: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = skip.dims4()?;
        if bg.dims() != skip.dims() {
            return Err(Error::shape(format!("background features {:?} vs skip {:?}", bg.dims(), skip.dims())));
        }
        let xs = self.norm_x.forward(skip)?.reshape((b, h * w, c))?;
        let bs = self.norm_bg.forward(bg)?.reshape((b, h * w, c))?;
        let a = attention(&self.q.forward(&xs)?, &self.k.forward(&bs)?, &self.v.forward(&bs)?, self.heads, None)?;
        Ok((skip + self.out.forward(&a)?.reshape((b, h, w, c))?)?)
    }
}

/// Keeps `skip` where the mask is strictly above `ts`, otherwise takes `W(skip, bg)`.
pub fn background_inject(
    skip: &Tensor,
    bg: &Tensor,
    mask: &Tensor,
    ts: f64,
    block: &BackgroundInjection,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&ts) {
        return Err(Error::invalid(format!("threshold {ts} outside [0, 1]")));
    }
    let (b, h, w, c) = skip.dims4()?;
    if mask.dims() != [b, h, w, 1] {
        return Err(Error::shape(format!("mask {:?} does not match features {:?}", mask.dims(), skip.dims())));
    }
    let keep = mask.gt(ts)?.broadcast_as((b, h, w, c))?;
    let transformed = block.transform(skip, bg)?;
    Ok(keep.where_cond(skip, &transformed)?)
}

/// Per-channel scale and shift from pooled style features and the timestep embedding.
#[derive(Debug, Clone)]
pub struct StyleModulation {
    scale: Linear,
    shift: Linear,
}

impl StyleModulation {
    pub fn new(b: &Builder, style_dim: usize, temb_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: Linear::zeros(&b.pp("scale"), style_dim + temb_dim, channels)?,
            shift: Linear::zeros(&b.pp("shift"), style_dim + temb_dim, channels)?,
        })
    }

    /// `(scale, shift)`, each `(B, C)`.
    pub fn project(&self, style: &Tensor, temb: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = Tensor::cat(&[style, temb], D::Minus1)?;
        Ok((self.scale.forward(&s)?, self.shift.forward(&s)?))
    }
}

/// Spatial mean of a `(B, H, W, C)` map.
pub fn global_average_pool(z: &Tensor) -> Result<Tensor> {
    Ok(z.mean(1)?.mean(1)?)
}

/// `z·(1 + scale) + shift` with `(B, C)` scale/shift broadcast over space.
pub fn modulate(z: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, _, _, c) = z.dims4()?;
    if scale.dims() != [b, c] || shift.dims() != [b, c] {
        return Err(Error::shape(format!("modulation {:?} does not match features {:?}", scale.dims(), z.dims())));
    }
    let scale = (scale.reshape((b, 1, 1, c))? + 1.0)?;
    Ok(z.broadcast_mul(&scale)?.broadcast_add(&shift.reshape((b, 1, 1, c))?)?)
}

/// Style modulation of decoder features `z` by pooled `z_style`.
pub fn style_modulate(z: &Tensor, z_style: &Tensor, temb: &Tensor, block: &StyleModulation) -> Result<Tensor> {
    let (scale, shift) = block.project(&global_average_pool(z_style)?, temb)?;
    modulate(z, &scale, &shift)
}

/// Everything the denoiser consumes besides `(z_t, t, sketch, tokens)`.
/// All fields `None` is the vanilla configuration.
#[derive(Debug, Clone, Default)]
pub struct InjectionBundle {
    /// One map per U-Net level, matching that level's skip features.
    pub z_bg: Option<Vec<Tensor>>,
    /// Deepest encoder features of the style branch.
    pub z_style: Option<Tensor>,
    pub sketch_masks: Option<MaskPyramid>,
    /// Per sample, per token: true for foreground.
    pub token_flags: Option<Vec<Vec<bool>>>,
    pub thresholds: Thresholds,
    pub lora_active: bool,
}

impl InjectionBundle {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_vanilla(&self) -> bool {
        self.z_bg.is_none() && self.z_style.is_none() && self.sketch_masks.is_none() && self.token_flags.is_none()
    }

    pub fn split_active(&self) -> bool {
        self.token_flags.is_some()
    }

    pub fn validate(&self, batch: usize, levels: usize) -> Result<()> {
        self.thresholds.validate()?;
        if (self.z_bg.is_some() || self.token_flags.is_some()) && self.sketch_masks.is_none() {
            return Err(Error::invalid("background injection and split attention need a sketch mask pyramid"));
        }
        if self.z_bg.is_some() && self.token_flags.is_none() {
            return Err(Error::invalid("background injection needs reference token flags"));
        }
        if let Some(m) = &self.sketch_masks {
            if m.levels.len() != levels || m.batch() != batch {
                return Err(Error::shape(format!(
                    "mask pyramid has {} levels for batch {}, expected {levels} for batch {batch}",
                    m.levels.len(),
                    m.batch()
                )));
            }
        }
        if let Some(z) = &self.z_bg {
            if z.len() != levels {
                return Err(Error::shape(format!("{} background maps for {levels} levels", z.len())));
            }
        }
        if let Some(f) = &self.token_flags {
            if f.len() != batch {
                return Err(Error::shape(format!("{} token flag rows for batch {batch}", f.len())));
            }
        }
        Ok(())
    }

    /// Per sample: (no foreground tokens, no background tokens). Either
    /// means that query group attends to every token.
    pub fn fallback_partitions(&self) -> Vec<(bool, bool)> {
        self.token_flags
            .as_ref()
            .map(|flags| flags.iter().map(|f| (!f.iter().any(|&x| x), f.iter().all(|&x| x))).collect())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attention_probs;
    use crate::params::{Group, GroupSet, ParamStore};
    use proptest::prelude::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        crate::sampler::seeded_normal(shape, seed, DType::F32, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn downsample_cases() {
        let ones = ImageTensor::filled(1, 8, 8, 1.0);
        assert!(downsample_mask(&ones, 2, 2).unwrap().data().iter().all(|&v| v == 1.0));
        let zeros = ImageTensor::filled(1, 8, 8, 0.0);
        assert!(downsample_mask(&zeros, 4, 4).unwrap().data().iter().all(|&v| v == 0.0));
        let block = ImageTensor::new(1, 2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(downsample_mask(&block, 1, 1).unwrap().data(), &[0.5]);
        let checker = ImageTensor::from_fn(1, 8, 8, |_, y, x| ((y + x) % 2) as f32);
        assert!(downsample_mask(&checker, 4, 4).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(downsample_mask(&ones, 3, 3).is_err());
    }

    #[test]
    fn token_flags_follow_patch_means() {
        let m = ImageTensor::from_fn(1, 8, 8, |_, y, x| if y < 4 && x < 4 { 1.0 } else { 0.0 });
        assert_eq!(token_flags(&m, 2, 0.5).unwrap(), vec![true, false, false, false]);
        let ones = ImageTensor::filled(1, 8, 8, 1.0);
        assert!(token_flags(&ones, 2, 0.5).unwrap().iter().all(|&f| f));
    }

    fn bg_block(store: &ParamStore, c: usize) -> BackgroundInjection {
        BackgroundInjection::new(&store.builder(Group::BgInjection, GroupSet::EMPTY), c, 2, 2).unwrap()
    }

    #[test]
    fn gate_with_full_mask_and_zero_init_is_identity() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let blk = bg_block(&store, 4);
        let skip = rand_tensor(&[1, 3, 3, 4], 1);
        let bg = rand_tensor(&[1, 3, 3, 4], 2);
        let ones = Tensor::ones((1, 3, 3, 1), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(flat(&background_inject(&skip, &bg, &ones, 0.5, &blk).unwrap()), flat(&skip));
        let zeros = ones.zeros_like().unwrap();
        assert_eq!(flat(&background_inject(&skip, &bg, &zeros, 0.5, &blk).unwrap()), flat(&skip));
        assert!(background_inject(&skip, &bg, &ones, 1.5, &blk).is_err());
    }

    #[test]
    fn gate_boundary_takes_transform_branch() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let blk = bg_block(&store, 4);
        // Handed-out parameters share storage with the store.
        store.set("bg_injection.out.weight", &rand_tensor(&[4, 4], 7)).unwrap();
        let skip = rand_tensor(&[1, 1, 2, 4], 3);
        let bg = rand_tensor(&[1, 1, 2, 4], 4);
        let mask = Tensor::new(&[0.5f32, 0.5001], &Device::Cpu).unwrap().reshape((1, 1, 2, 1)).unwrap();
        let out = flat(&background_inject(&skip, &bg, &mask, 0.5, &blk).unwrap());
        let w = flat(&blk.transform(&skip, &bg).unwrap());
        let s = flat(&skip);
        assert_eq!(&out[..4], &w[..4]);
        assert_eq!(&out[4..], &s[4..]);
        assert_ne!(&w[..4], &s[..4]);
    }

    #[test]
    fn style_identity_substitution_and_gap() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let blk = StyleModulation::new(&store.builder(Group::StyleInjection, GroupSet::EMPTY), 3, 2, 4).unwrap();
        let z = rand_tensor(&[2, 3, 3, 4], 5);
        let zs = rand_tensor(&[2, 2, 2, 3], 6);
        let temb = rand_tensor(&[2, 2], 7);
        assert_eq!(flat(&style_modulate(&z, &zs, &temb, &blk).unwrap()), flat(&z));

        let dev = Device::Cpu;
        let z2 = Tensor::full(2.0f32, (1, 2, 2, 3), &dev).unwrap();
        let scale = Tensor::full(0.5f32, (1, 3), &dev).unwrap();
        let shift = Tensor::full(1.0f32, (1, 3), &dev).unwrap();
        assert!(flat(&modulate(&z2, &scale, &shift).unwrap()).iter().all(|&v| v == 4.0));

        let c = Tensor::full(0.37f32, (1, 4, 4, 3), &dev).unwrap();
        assert!(flat(&global_average_pool(&c).unwrap()).iter().all(|&v| v == 0.37));
        assert!(modulate(&z2, &Tensor::zeros((1, 2), DType::F32, &dev).unwrap(), &shift).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn modulation_is_affine(a in -3.0f32..3.0, b in -3.0f32..3.0, seed in 0u64..1000) {
            let z = rand_tensor(&[1, 2, 2, 3], seed);
            let scale = rand_tensor(&[1, 3], seed + 1);
            let shift = rand_tensor(&[1, 3], seed + 2);
            let lhs = flat(&modulate(&((&z * a as f64).unwrap() + b as f64).unwrap(), &scale, &shift).unwrap());
            let fz = flat(&modulate(&z, &scale, &shift).unwrap());
            let sc = flat(&scale);
            let sh = flat(&shift);
            for (i, l) in lhs.iter().enumerate() {
                let ch = i % 3;
                // f(a·z + b) = a·f(z) + b·(1 + scale) + (1 − a)·shift
                let want = a * fz[i] + b * (1.0 + sc[ch]) + (1.0 - a) * sh[ch];
                prop_assert!((l - want).abs() < 1e-4, "{} vs {}", l, want);
            }
        }
    }

    fn attn_setup(store: &ParamStore) -> (Linear, Linear, Linear, SplitLora) {
        let all = GroupSet::of(&Group::ALL);
        let b = store.builder(Group::Unet, all);
        let lb = store.builder(Group::LoraSplitAttn, all);
        (
            Linear::no_bias(&b.pp("q"), 8, 8).unwrap(),
            Linear::no_bias(&b.pp("k"), 6, 8).unwrap(),
            Linear::no_bias(&b.pp("v"), 6, 8).unwrap(),
            SplitLora::new(&lb, 8, 6, 2, 2.0).unwrap(),
        )
    }

    #[test]
    fn degenerate_partition_is_standard_attention() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 1);
        let (q, k, v, lora) = attn_setup(&store);
        let x = rand_tensor(&[1, 5, 8], 1);
        let tok = rand_tensor(&[1, 4, 6], 2);
        let fg = Tensor::ones((1, 5, 1), DType::U8, &Device::Cpu).unwrap();
        let out = split_cross_attention(&x, &tok, AttnProjections { q: &q, k: &k, v: &v }, Some(&lora), &fg, &[vec![true; 4]], true, 2).unwrap();
        let want = attention(&q.forward(&x).unwrap(), &k.forward(&tok).unwrap(), &v.forward(&tok).unwrap(), 2, None).unwrap();
        assert_eq!(flat(&out), flat(&want));
    }

    /// Independent masked softmax over an explicit token subset.
    fn subset_attention(q: &[f32], k: &[Vec<f32>], v: &[Vec<f32>], keep: &[bool], heads: usize) -> Vec<f32> {
        let c = q.len();
        let dh = c / heads;
        let mut out = vec![0.0f32; c];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| q[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| (*a * *b) as f64).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().zip(keep).filter(|(_, &kp)| kp).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().zip(keep).map(|(l, &kp)| if kp { (l - m).exp() } else { 0.0 }).collect();
            let s: f64 = w.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for (o, vv) in out[r.clone()].iter_mut().zip(&vj[r.clone()]) {
                    *o += (w[j] / s) as f32 * vv;
                }
            }
        }
        out
    }

    #[test]
    fn background_queries_see_only_background_tokens() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 2);
        let (q, k, v, lora) = attn_setup(&store);
        let x = rand_tensor(&[1, 4, 8], 3);
        let tok = rand_tensor(&[1, 4, 6], 4);
        let flags = vec![vec![true, false, true, false]];
        let fgq = Tensor::new(&[1u8, 0, 1, 0], &Device::Cpu).unwrap().reshape((1, 4, 1)).unwrap();
        let out = split_cross_attention(&x, &tok, AttnProjections { q: &q, k: &k, v: &v }, Some(&lora), &fgq, &flags, true, 2).unwrap();
        let out = out.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let qs = q.forward(&x).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let ks = k.forward(&tok).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let vs = v.forward(&tok).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        for p in 0..4 {
            let keep: Vec<bool> = flags[0].iter().map(|&f| f == (p % 2 == 0)).collect();
            let want = subset_attention(&qs[p], &ks, &vs, &keep, 2);
            for (a, b) in out[p].iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "query {p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn foreground_rows_normalize_over_foreground_tokens() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 3);
        let (q, k, _, _) = attn_setup(&store);
        let x = rand_tensor(&[1, 3, 8], 5);
        let tok = rand_tensor(&[1, 4, 6], 6);
        let flags = vec![vec![true, true, false, false]];
        let bias = key_bias_from_flags(&with_fallback(&flags, true), DType::F32, &Device::Cpu).unwrap();
        let p = attention_probs(&q.forward(&x).unwrap(), &k.forward(&tok).unwrap(), 2, Some(&bias)).unwrap();
        let p = p.flatten_to(2).unwrap().to_vec2::<f32>().unwrap();
        for row in p {
            let fg: f32 = row[..2].iter().sum();
            assert!((fg - 1.0).abs() < 1e-6 && row[2..].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn bundle_validation_and_fallbacks() {
        assert!(InjectionBundle::empty().is_vanilla());
        InjectionBundle::empty().validate(2, 3).unwrap();
        let needs_masks = InjectionBundle { token_flags: Some(vec![vec![true; 4]]), ..Default::default() };
        assert!(needs_masks.validate(1, 3).is_err());
        let b = InjectionBundle { token_flags: Some(vec![vec![true; 4], vec![false; 4], vec![true, false, true, true]]), ..Default::default() };
        assert_eq!(b.fallback_partitions(), vec![(false, true), (true, false), (false, false)]);
    }
}
