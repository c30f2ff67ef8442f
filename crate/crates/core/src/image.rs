//! Planar float images in `[0, 1]` and their PNG encoding.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A `channels × height × width` image stored channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        let mut img = Self { channels, height, width, data };
        img.clamp();
        Ok(img)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )))
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn clamp(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        ImageTensor::from_fn(self.channels, height, width, |c, y, x| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
            bilinear(self, c, fy, fx)
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(ImageTensor::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Rec. 601 luma for color images; identity for single-channel images.
    pub fn to_gray(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        ImageTensor::from_fn(1, self.height, self.width, |_, y, x| {
            0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x)
        })
    }

    /// Converts to a `(1, H, W, C)` tensor, the layout the networks consume.
    pub fn to_nhwc(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(self.get(ch, y, x));
                }
            }
        }
        Ok(Tensor::from_vec(out, (1, h, w, c), device)?.to_dtype(dtype)?)
    }

    /// Builds one image per batch entry from a `(B, H, W, C)` tensor, clamping to `[0, 1]`.
    pub fn from_nhwc(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, h, w, c) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let per = h * w * c;
        (0..b)
            .map(|i| {
                let s = &flat[i * per..(i + 1) * per];
                let mut data = vec![0.0; per];
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            data[(ch * h + y) * w + x] = s[(y * w + x) * c + ch];
                        }
                    }
                }
                ImageTensor::new(c, h, w, data)
            })
            .collect()
    }

    pub fn stack_nhwc(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|im| im.to_nhwc(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 4);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = |c: usize| quantize(self.get(c.min(self.channels - 1), y, x));
                out.extend_from_slice(&[px(0), px(1), px(2), 255]);
            }
        }
        out
    }

    /// 8-bit PNG: luma for one channel, RGB for three.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 1 {
            let buf: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
            image::GrayImage::from_raw(w, h, buf).expect("buffer sized").save(path)
        } else {
            let mut buf = Vec::with_capacity(self.data.len());
            for y in 0..self.height {
                for x in 0..self.width {
                    for c in 0..3 {
                        buf.push(quantize(self.get(c, y, x)));
                    }
                }
            }
            image::RgbImage::from_raw(w, h, buf).expect("buffer sized").save(path)
        };
        res.map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Loads a PNG as `channels` (1 or 3) planes, converting color spaces as needed.
    pub fn load_png(path: &Path, channels: usize) -> Result<ImageTensor> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match channels {
            1 => {
                let g = img.to_luma8();
                let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
                ImageTensor::new(1, h, w, data)
            }
            3 => {
                let rgb = img.to_rgb8();
                let raw = rgb.as_raw();
                Ok(ImageTensor::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0))
            }
            n => Err(Error::invalid(format!("cannot load {n}-channel image"))),
        }
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Edge-clamped bilinear sample at fractional pixel coordinates.
pub fn bilinear(img: &ImageTensor, c: usize, fy: f32, fx: f32) -> f32 {
    let maxy = (img.height - 1) as f32;
    let maxx = (img.width - 1) as f32;
    let fy = fy.clamp(0.0, maxy);
    let fx = fx.clamp(0.0, maxx);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let ty = fy - y0 as f32;
    let tx = fx - x0 as f32;
    let top = img.get(c, y0, x0) * (1.0 - tx) + img.get(c, y0, x1) * tx;
    let bot = img.get(c, y1, x0) * (1.0 - tx) + img.get(c, y1, x1) * tx;
    top * (1.0 - ty) + bot * ty
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_clamped() {
        let img = ImageTensor::new(1, 1, 3, vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_bad_channel_count() {
        assert!(ImageTensor::new(2, 1, 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn nhwc_round_trip() {
        let img = ImageTensor::from_fn(3, 4, 5, |c, y, x| (c * 20 + y * 5 + x) as f32 / 64.0);
        let t = img.to_nhwc(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 4, 5, 3]);
        let back = ImageTensor::from_nhwc(&t).unwrap();
        assert_eq!(back[0], img);
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = ImageTensor::from_fn(3, 6, 7, |c, y, x| ((c + y * 7 + x) % 256) as f32 / 255.0);
        img.save_png(&p).unwrap();
        let back = ImageTensor::load_png(&p, 3).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageTensor::filled(3, 8, 8, 0.25);
        let r = img.resize(13, 11);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert_eq!(img.resize(8, 8), img);
    }
}
