//! Channels-last layers on top of candle, with custom CPU kernels for the
//! hot paths (patch extraction for convolutions and a fused softmax).
//!
//! Activations are `(B, H, W, C)`; convolution weights are stored as
//! `(k·k·C_in, C_out)` matrices so a convolution is one im2col plus one matmul.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::error::Result;
use crate::params::{Builder, Init};

type CResult<T> = candle_core::Result<T>;

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

#[derive(Debug, Clone, Copy)]
struct Window {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Visits every (output row, tap, input pixel) triple that lies in bounds.
    fn for_each(&self, b: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (bi * ho + oy) * wo + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let pix = (bi * h + iy as usize) * w + ix as usize;
                            f(row, ky * self.k + kx, pix);
                        }
                    }
                }
            }
        }
    }
}

fn im2col_kernel<T: Copy + Default>(src: &[T], dims: (usize, usize, usize, usize), win: Window) -> Vec<T> {
    let (b, h, w, c) = dims;
    let taps = win.k * win.k;
    let rows = b * win.out_len(h) * win.out_len(w);
    let mut out = vec![T::default(); rows * taps * c];
    win.for_each(b, h, w, |row, tap, pix| {
        let dst = (row * taps + tap) * c;
        out[dst..dst + c].copy_from_slice(&src[pix * c..pix * c + c]);
    });
    out
}

fn col2im_kernel<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    dims: (usize, usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let (b, h, w, c) = dims;
    let taps = win.k * win.k;
    let mut out = vec![T::default(); b * h * w * c];
    win.for_each(b, h, w, |row, tap, pix| {
        let s = (row * taps + tap) * c;
        for (o, v) in out[pix * c..pix * c + c].iter_mut().zip(&src[s..s + c]) {
            *o += *v;
        }
    });
    out
}

/// `(B, H, W, C) → (B·Ho·Wo, k·k·C)` patch matrix.
struct Im2Col(Window);

/// Adjoint of [`Im2Col`]: scatters patch rows back, summing overlaps.
struct Col2Im {
    win: Window,
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, h, w, c) = dims;
        let shape = Shape::from((b * self.0.out_len(h) * self.0.out_len(w), self.0.k * self.0.k * c));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_kernel(contiguous_slice(v, layout)?, dims, self.0)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_kernel(contiguous_slice(v, layout)?, dims, self.0)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> CResult<Option<Tensor>> {
        let dims = arg.dims4()?;
        let g = grad_res.contiguous()?.apply_op1(Col2Im { win: self.0, dims })?;
        Ok(Some(g))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_kernel(contiguous_slice(v, layout)?, self.dims, self.win)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_kernel(contiguous_slice(v, layout)?, self.dims, self.win)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, Shape::from(self.dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> CResult<Option<Tensor>> {
        let g = grad_res.contiguous()?.apply_op1(Im2Col(self.win))?;
        Ok(Some(g))
    }
}

/// Row-wise softmax over the last dimension with an analytic backward.
struct SoftmaxLastDim;

fn softmax_rows<T: num_traits::Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (o, s) in out.chunks_mut(dim).zip(src.chunks(dim)) {
        let max = s.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for (oi, &si) in o.iter_mut().zip(s) {
            *oi = (si - max).exp();
            sum = sum + *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / sum;
        }
    }
    out
}

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dim = *layout.shape().dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous_slice(v, layout)?, dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous_slice(v, layout)?, dim)),
            _ => candle_core::bail!("softmax: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> CResult<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some(grad_res.broadcast_sub(&dot)?.mul(res)?))
    }
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLastDim)?)
}

/// Fused im2col + matmul. The patch matrix stays out of the autograd graph;
/// the backward pass rebuilds it for the weight gradient.
struct ConvOp(Window);

impl ConvOp {
    fn forward_t<T>(&self, x: &[T], dims: (usize, usize, usize, usize), w: &[T], wdims: (usize, usize)) -> CResult<Vec<T>>
    where
        T: candle_core::WithDType + Default,
    {
        let cols = im2col_kernel(x, dims, self.0);
        let rows = cols.len() / wdims.0;
        let cols = Tensor::from_vec(cols, (rows, wdims.0), &candle_core::Device::Cpu)?;
        let w = Tensor::from_slice(w, wdims, &candle_core::Device::Cpu)?;
        cols.matmul(&w)?.flatten_all()?.to_vec1::<T>()
    }
}

impl candle_core::CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d-nhwc"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let wdims = l2.shape().dims2()?;
        let (b, h, w, _) = dims;
        let shape = Shape::from((b, self.0.out_len(h), self.0.out_len(w), wdims.1));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => {
                CpuStorage::F32(self.forward_t(contiguous_slice(x, l1)?, dims, contiguous_slice(k, l2)?, wdims)?)
            }
            (CpuStorage::F64(x), CpuStorage::F64(k)) => {
                CpuStorage::F64(self.forward_t(contiguous_slice(x, l1)?, dims, contiguous_slice(k, l2)?, wdims)?)
            }
            _ => candle_core::bail!("conv2d: unsupported or mismatched dtypes"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims4()?;
        let cout = w.dim(1)?;
        let g = grad.contiguous()?.reshape(((), cout))?;
        let cols = x.detach().contiguous()?.apply_op1(Im2Col(self.0))?;
        let dw = cols.t()?.matmul(&g)?;
        let dx = g.matmul(&w.detach().t()?)?.contiguous()?.apply_op1(Col2Im { win: self.0, dims })?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Convolution over a channels-last input with a `(k·k·C_in, C_out)` weight.
pub fn conv2d_nhwc(x: &Tensor, weight: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let cout = weight.dim(1)?;
    if weight.dim(0)? != k * k * c {
        return Err(crate::Error::shape(format!(
            "conv weight rows {} != {k}x{k}x{c}",
            weight.dim(0)?
        )));
    }
    if k == 1 && stride == 1 && pad == 0 {
        return Ok(x.reshape((b * h * w, c))?.matmul(weight)?.reshape((b, h, w, cout))?);
    }
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, ConvOp(Window { k, stride, pad }))?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(b: &Builder, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = (k * k * cin) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Ok(Self {
            weight: b.get("weight", (k * k * cin, cout), Init::Uniform(bound))?,
            bias: b.get("bias", cout, Init::Uniform(bound))?,
            k,
            stride,
            pad: k / 2,
        })
    }

    pub fn zeros(b: &Builder, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", (k * k * cin, cout), Init::Zeros)?,
            bias: b.get("bias", cout, Init::Zeros)?,
            k,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_nhwc(x, &self.weight, self.k, self.stride, self.pad)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Dense layer over the last dimension; weight stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &Builder, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self {
            weight: b.get("weight", (din, dout), Init::Uniform(bound))?,
            bias: Some(b.get("bias", dout, Init::Uniform(bound))?),
        })
    }

    pub fn no_bias(b: &Builder, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self { weight: b.get("weight", (din, dout), Init::Uniform(bound))?, bias: None })
    }

    /// Zero weight and bias: contributes exactly nothing until trained.
    pub fn zeros(b: &Builder, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", (din, dout), Init::Zeros)?,
            bias: Some(b.get("bias", dout, Init::Zeros)?),
        })
    }

    pub fn with_init(b: &Builder, din: usize, dout: usize, init: Init, bias: bool) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", (din, dout), init)?,
            bias: if bias { Some(b.get("bias", dout, Init::Zeros)?) } else { None },
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, din))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Group normalization over `(H, W, C/G)` for each group of a channels-last tensor.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &Builder, channels: usize, groups: usize) -> Result<Self> {
        let groups = if channels % groups == 0 { groups } else { 1 };
        Ok(Self {
            gamma: b.get("gamma", channels, Init::Ones)?,
            beta: b.get("beta", channels, Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    /// Accepts `(B, N, C)` or `(B, H, W, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let b = dims[0];
        let c = *dims.last().unwrap();
        let n: usize = dims[1..dims.len() - 1].iter().product();
        let g = self.groups;
        let xg = x.reshape((b, n, g, c / g))?.transpose(1, 2)?.reshape((b, g, n * (c / g)))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, g, n, c / g))?.transpose(1, 2)?.reshape(dims)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Nearest-neighbour 2× upsampling of a `(B, H, W, C)` tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Scaled dot-product attention over `(B, N, C)` inputs split into `heads`.
/// `key_bias`, when given, is `(B, Nk)` and added to every query row's logits.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, key_bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, nq, c) = q.dims3()?;
    let nk = k.dim(1)?;
    let dh = c / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        Ok(t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q, nq)?, split(k, nk)?, split(v, nk)?);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut logits = (qh.matmul(&kh.t()?)? * scale)?;
    if let Some(bias) = key_bias {
        logits = logits.broadcast_add(&bias.reshape((b, 1, 1, nk))?)?;
    }
    let p = softmax_last_dim(&logits)?;
    Ok(p.matmul(&vh)?.transpose(1, 2)?.reshape((b, nq, c))?)
}

/// Attention probabilities only (for inspection and tests), `(B, heads, Nq, Nk)`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize, key_bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, nq, c) = q.dims3()?;
    let nk = k.dim(1)?;
    let dh = c / heads;
    let qh = q.reshape((b, nq, heads, dh))?.transpose(1, 2)?.contiguous()?;
    let kh = k.reshape((b, nk, heads, dh))?.transpose(1, 2)?.contiguous()?;
    let mut logits = (qh.matmul(&kh.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    if let Some(bias) = key_bias {
        logits = logits.broadcast_add(&bias.reshape((b, 1, 1, nk))?)?;
    }
    softmax_last_dim(&logits)
}

/// Large negative logit used to exclude keys from a softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// `(B, Nk)` additive bias: 0 for allowed keys, [`MASKED_LOGIT`] otherwise.
pub fn key_bias_from_flags(flags: &[Vec<bool>], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let b = flags.len();
    let nk = flags.first().map_or(0, |f| f.len());
    let data: Vec<f64> = flags
        .iter()
        .flat_map(|f| f.iter().map(|&ok| if ok { 0.0 } else { MASKED_LOGIT }))
        .collect();
    Ok(Tensor::from_vec(data, (b, nk), device)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding: first half `sin(t·ω_i)`, second half `cos(t·ω_i)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut row = vec![0.0f64; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            row[i] = a.sin();
            row[half + i] = a.cos();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &[f64], dims: (usize, usize, usize, usize), w: &[f64], cout: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let (b, h, wd, c) = dims;
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * ho * wo * cout];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xv = x[((bi * h + iy as usize) * wd + ix as usize) * c + ci];
                                    acc += xv * w[((ky * k + kx) * c + ci) * cout + co];
                                }
                            }
                        }
                        out[((bi * ho + oy) * wo + ox) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let dev = Device::Cpu;
        for &(k, s) in &[(3usize, 1usize), (3, 2), (1, 1)] {
            let dims = (2, 6, 5, 3);
            let x: Vec<f64> = (0..2 * 6 * 5 * 3).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
            let cout = 4;
            let w: Vec<f64> = (0..k * k * 3 * cout).map(|i| ((i * 13 % 11) as f64 - 5.0) / 7.0).collect();
            let xt = Tensor::from_vec(x.clone(), (2, 6, 5, 3), &dev).unwrap();
            let wt = Tensor::from_vec(w.clone(), (k * k * 3, cout), &dev).unwrap();
            let y = conv2d_nhwc(&xt, &wt, k, s, k / 2).unwrap();
            let want = naive_conv(&x, dims, &w, cout, k, s, k / 2);
            let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::from_vec((0..2 * 4 * 4 * 2).map(|i| ((i * 7 % 9) as f64 - 4.0) / 5.0).collect::<Vec<_>>(), (2, 4, 4, 2), &dev).unwrap();
        let w = Var::from_vec((0..9 * 2 * 3).map(|i| ((i * 5 % 7) as f64 - 3.0) / 4.0).collect::<Vec<_>>(), (18, 3), &dev).unwrap();
        let loss = |xt: &Tensor, wt: &Tensor| conv2d_nhwc(xt, wt, 3, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(x.as_tensor(), w.as_tensor()).backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xv = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in [0usize, 5, 17, 31] {
            let mut p = xv.clone();
            p[i] += eps;
            let mut m = xv.clone();
            m[i] -= eps;
            let lp = loss(&Tensor::from_vec(p, (2, 4, 4, 2), &dev).unwrap(), w.as_tensor()).to_scalar::<f64>().unwrap();
            let lm = loss(&Tensor::from_vec(m, (2, 4, 4, 2), &dev).unwrap(), w.as_tensor()).to_scalar::<f64>().unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} ad={}", gx[i]);
        }
        assert!(grads.get(w.as_tensor()).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches() {
        let dev = Device::Cpu;
        let x = Var::from_vec(vec![0.1f64, -2.0, 3.0, 0.5, 0.0, 1.0], (2, 3), &dev).unwrap();
        let p = softmax_last_dim(x.as_tensor()).unwrap();
        let rows = p.sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-12));
        let wts = Tensor::new(&[[1.0f64, 2.0, -1.0], [0.5, -0.5, 3.0]], &dev).unwrap();
        let f = |t: &Tensor| (softmax_last_dim(t).unwrap() * &wts).unwrap().sum_all().unwrap();
        let g = f(x.as_tensor()).backward().unwrap().get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xv = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..6 {
            let mut a = xv.clone();
            a[i] += 1e-6;
            let mut b = xv.clone();
            b[i] -= 1e-6;
            let fa = f(&Tensor::from_vec(a, (2, 3), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fb = f(&Tensor::from_vec(b, (2, 3), &dev).unwrap()).to_scalar::<f64>().unwrap();
            assert!(((fa - fb) / 2e-6 - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn timestep_zero_pattern() {
        let e = timestep_embedding(&[0], 8, DType::F64, &Device::Cpu).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(e[0], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], (1, 2, 2, 1), &Device::Cpu).unwrap();
        let y = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }
}
