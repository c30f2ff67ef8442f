//! Browser demo over the data side of the colorizer: synthetic scenes,
//! thin plate spline deformation of the reference, and a preview of where
//! the background-injection gate opens at each U-Net level.
//!
//! Everything returns RGBA bytes for a canvas. The pure functions are plain
//! Rust so they can be tested natively; [`Demo`] wraps them for JavaScript.

use sketchcolor::datagen::{bleach_background, gen_synthetic_triple, tps_warp, ImageTriple, SceneSpec, TpsParams};
use sketchcolor::injection::{downsample_mask, token_flags};
use sketchcolor::metrics::{ms_ssim, psnr};
use sketchcolor::{ImageTensor, Result};
use wasm_bindgen::prelude::*;

/// Latent downsampling factor of the default model.
pub const VAE_FACTOR: usize = 4;
/// Reference token grid of the default model.
pub const TOKEN_GRID: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: ImageTensor,
    pub mask: ImageTensor,
    pub psnr: f64,
    pub ms_ssim: f64,
}

pub fn scene(seed: u64, size: usize) -> Result<ImageTriple> {
    gen_synthetic_triple(&SceneSpec::random(seed, size), format!("scene-{seed}"))
}

/// Deforms the scene as an evaluation reference would be, and scores the
/// deformed image against the original.
pub fn warp(t: &ImageTriple, grid: usize, magnitude: f64, seed: u64) -> Result<WarpResult> {
    let p = TpsParams::random(grid, t.color.height(), t.color.width(), magnitude, seed);
    let image = tps_warp(&t.color, &p)?;
    let mask = tps_warp(&t.mask, &p)?;
    Ok(WarpResult { psnr: psnr(&image, &t.color)?, ms_ssim: ms_ssim(&image, &t.color)?, image, mask })
}

/// Gate of background injection at a feature map of `size / (f·2^level)`
/// pixels: where the pooled sketch mask exceeds `threshold` the decoder keeps
/// its own features (shown in color); elsewhere the background branch takes
/// over (shown bleached).
pub fn gate_preview(t: &ImageTriple, level: usize, threshold: f64) -> Result<ImageTensor> {
    let (h, w) = (t.mask.height(), t.mask.width());
    let side = (h / VAE_FACTOR) >> level;
    let pooled = downsample_mask(&t.mask, side.max(1), side.max(1))?;
    let (fy, fx) = (h / pooled.height(), w / pooled.width());
    let gate = ImageTensor::from_fn(1, h, w, |_, y, x| if pooled.get(0, y / fy, x / fx) as f64 > threshold { 1.0 } else { 0.0 });
    bleach_background(&t.color, &gate, false)
}

/// Foreground flags of the reference tokens, row-major over the token grid.
pub fn token_partition(mask: &ImageTensor, threshold: f64) -> Result<Vec<bool>> {
    token_flags(mask, TOKEN_GRID, threshold)
}

/// Draws the token grid over `img`: background tokens darkened.
pub fn overlay_tokens(img: &ImageTensor, flags: &[bool]) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let (th, tw) = (h / TOKEN_GRID, w / TOKEN_GRID);
    ImageTensor::from_fn(img.channels(), h, w, |c, y, x| {
        let edge = y % th == 0 || x % tw == 0;
        let fg = flags[(y / th).min(TOKEN_GRID - 1) * TOKEN_GRID + (x / tw).min(TOKEN_GRID - 1)];
        let v = img.get(c, y, x);
        if edge {
            0.0
        } else if fg {
            v
        } else {
            v * 0.35
        }
    })
}

fn js(e: sketchcolor::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Demo state held by the page.
#[wasm_bindgen]
pub struct Demo {
    triple: ImageTriple,
    warped: Option<WarpResult>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize) -> std::result::Result<Demo, JsError> {
        if size < 16 || size % (VAE_FACTOR * TOKEN_GRID) != 0 {
            return Err(JsError::new("size must be a multiple of 16"));
        }
        Ok(Demo { triple: scene(seed, size).map_err(js)?, warped: None })
    }

    pub fn size(&self) -> usize {
        self.triple.color.height()
    }

    pub fn color(&self) -> Vec<u8> {
        self.triple.color.to_rgba8()
    }

    pub fn sketch(&self) -> Vec<u8> {
        self.triple.sketch.to_rgba8()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.triple.mask.to_rgba8()
    }

    /// Warps the color image; read the scores with `warp_psnr` and `warp_ms_ssim`.
    pub fn warp(&mut self, grid: usize, magnitude: f64, seed: u64) -> std::result::Result<Vec<u8>, JsError> {
        let r = warp(&self.triple, grid, magnitude, seed).map_err(js)?;
        let flags = token_partition(&r.mask, 0.5).map_err(js)?;
        let rgba = overlay_tokens(&r.image, &flags).to_rgba8();
        self.warped = Some(r);
        Ok(rgba)
    }

    pub fn warp_psnr(&self) -> f64 {
        self.warped.as_ref().map_or(f64::NAN, |r| r.psnr)
    }

    pub fn warp_ms_ssim(&self) -> f64 {
        self.warped.as_ref().map_or(f64::NAN, |r| r.ms_ssim)
    }

    pub fn gate(&self, level: usize, threshold: f64) -> std::result::Result<Vec<u8>, JsError> {
        Ok(gate_preview(&self.triple, level, threshold).map_err(js)?.to_rgba8())
    }
}
