//! Image-quality and disentanglement metrics.

use crate::datagen::{blur_plane, max_norm};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::Embedder;

pub const PSNR_CAP_DB: f64 = 99.0;
const PSNR_MIN_MSE: f64 = 1e-10;

/// Standard five-scale weights; truncated and renormalized on small images.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SSIM_MIN_SCALE_PX: usize = 8;
const SSIM_SIGMA: f32 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Minimum share of pixels each mask region must cover.
pub const MIN_REGION_FRACTION: f64 = 0.01;

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse < PSNR_MIN_MSE {
        Ok(PSNR_CAP_DB)
    } else {
        Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
    }
}

/// Number of dyadic scales such that the coarsest is at least 8 px, at most 5.
pub fn ms_ssim_scales(height: usize, width: usize) -> usize {
    let mut m = 0;
    let mut d = height.min(width);
    while m < MS_SSIM_WEIGHTS.len() && d >= MS_SSIM_MIN_SCALE_PX {
        m += 1;
        d /= 2;
    }
    m
}

fn pool2(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            out[y * w2 + x] = 0.25
                * (p[2 * y * w + 2 * x]
                    + p[2 * y * w + 2 * x + 1]
                    + p[(2 * y + 1) * w + 2 * x]
                    + p[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, h2, w2)
}

fn blur64(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let f: Vec<f32> = p.iter().map(|&v| v as f32).collect();
    blur_plane(&f, h, w, SSIM_SIGMA).into_iter().map(|v| v as f64).collect()
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn ssim_terms(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let mx = blur64(x, h, w);
    let my = blur64(y, h, w);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let sxx = blur64(&xx, h, w);
    let syy = blur64(&yy, h, w);
    let sxy = blur64(&xy, h, w);
    let n = (h * w) as f64;
    let (mut l, mut cs) = (0.0, 0.0);
    for i in 0..h * w {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cov = sxy[i] - mx[i] * my[i];
        l += (2.0 * mx[i] * my[i] + SSIM_C1) / (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1);
        cs += (2.0 * cov + SSIM_C2) / (vx + vy + SSIM_C2);
    }
    (l / n, cs / n)
}

/// Multi-scale SSIM averaged over channels. Negative contrast-structure
/// terms are clamped to zero so the score stays in `[0, 1]`.
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b, "ms_ssim")?;
    let (h, w) = (a.height(), a.width());
    let scales = ms_ssim_scales(h, w);
    if scales < 2 || h.min(w) < 16 {
        return Err(Error::invalid(format!("ms_ssim needs at least 16x16 pixels, got {h}x{w}")));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for c in 0..a.channels() {
        let mut x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let mut y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let (mut hh, mut ww) = (h, w);
        let mut score = 1.0;
        for (s, wgt) in weights.iter().enumerate() {
            let (l, cs) = ssim_terms(&x, &y, hh, ww);
            let wgt = wgt / total;
            score *= cs.max(0.0).powf(wgt);
            if s + 1 == scales {
                score *= l.max(0.0).powf(wgt);
            } else {
                let (px, h2, w2) = pool2(&x, hh, ww);
                let (py, _, _) = pool2(&y, hh, ww);
                x = px;
                y = py;
                hh = h2;
                ww = w2;
            }
        }
        acc += score;
    }
    Ok(acc / a.channels() as f64)
}

fn region_means(img: &ImageTensor, mask: &ImageTensor) -> Result<([f32; 3], [f32; 3])> {
    if img.channels() != 3 || mask.channels() != 1 || img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::shape("entanglement_score: expects a 3-channel image and aligned 1-channel mask"));
    }
    let n = img.height() * img.width();
    let (mut fg, mut bg) = ([0.0f64; 3], [0.0f64; 3]);
    let (mut nf, mut nb) = (0usize, 0usize);
    for i in 0..n {
        let is_fg = mask.data()[i] > 0.5;
        for c in 0..3 {
            let v = img.plane(c)[i] as f64;
            if is_fg { fg[c] += v } else { bg[c] += v }
        }
        if is_fg { nf += 1 } else { nb += 1 }
    }
    let min = (MIN_REGION_FRACTION * n as f64).ceil() as usize;
    if nf < min.max(1) || nb < min.max(1) {
        return Err(Error::invalid(format!(
            "degenerate mask: {nf} foreground / {nb} background pixels, need {min} each"
        )));
    }
    let f = |s: [f64; 3], k: usize| [(s[0] / k as f64) as f32, (s[1] / k as f64) as f32, (s[2] / k as f64) as f32];
    Ok((f(fg, nf), f(bg, nb)))
}

/// How much more the result's background resembles the reference background
/// than the reference foreground. Lower is better; negative means the
/// background took the reference background's color.
pub fn entanglement_score(
    result: &ImageTensor,
    reference: &ImageTensor,
    sketch_mask: &ImageTensor,
    reference_mask: &ImageTensor,
) -> Result<f64> {
    let (_, result_bg) = region_means(result, sketch_mask)?;
    let (ref_fg, ref_bg) = region_means(reference, reference_mask)?;
    Ok((max_norm(result_bg, ref_bg) - max_norm(result_bg, ref_fg)) as f64)
}

/// Cosine similarity of the frozen embedder's CLS vectors. A proxy for
/// CLIP similarity, not a reproduction of it.
pub fn embed_cosine(embedder: &Embedder, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let ea = embedder.embed_image(a)?;
    let eb = embedder.embed_image(b)?;
    let va: Vec<f64> = ea.cls.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    let vb: Vec<f64> = eb.cls.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    if va == vb {
        return Ok(1.0);
    }
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NonFinite("embed_cosine: zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
