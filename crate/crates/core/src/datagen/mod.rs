//! Synthetic training data and the image transforms used around the model:
//! sketch extraction, background bleaching, character-mask merging, TPS
//! deformation and training-batch assembly.

mod batch;
mod manifest;
mod scene;
mod tps;

pub use batch::{make_training_batch, resize_crop_target, CropWindow, TrainingBatch};
pub use manifest::{load_dataset, write_dataset, ManifestRecord, MANIFEST_FILE};
pub use scene::{
    gen_synthetic_triple, max_norm, SceneSpec, ShapeKind, ShapeSpec, Texture, MIN_PALETTE_DISTANCE,
};
pub use tps::{tps_warp, TpsParams};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Aligned sketch (1ch), color (3ch) and foreground mask (1ch).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriple {
    pub id: String,
    pub sketch: ImageTensor,
    pub color: ImageTensor,
    pub mask: ImageTensor,
}

pub const DOG_SIGMA: f32 = 0.7;
pub const DOG_SIGMA_RATIO: f32 = 2.0;
/// Responses below this stay white; at twice this they are fully dark.
pub const DOG_THRESHOLD: f32 = 0.03;

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of one plane with replicated borders.
pub(crate) fn blur_plane(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Difference-of-Gaussians line extractor: the strongest per-channel DoG
/// magnitude is mapped through a smooth threshold to dark-on-white lines.
pub fn extract_sketch(color: &ImageTensor) -> Result<ImageTensor> {
    if color.channels() != 3 {
        return Err(Error::shape("extract_sketch expects a 3-channel image"));
    }
    let (h, w) = (color.height(), color.width());
    let mut response = vec![0.0f32; h * w];
    for c in 0..3 {
        let fine = blur_plane(color.plane(c), h, w, DOG_SIGMA);
        let coarse = blur_plane(color.plane(c), h, w, DOG_SIGMA * DOG_SIGMA_RATIO);
        for i in 0..h * w {
            response[i] = response[i].max((fine[i] - coarse[i]).abs());
        }
    }
    let data = response
        .into_iter()
        .map(|r| {
            let t = ((r - DOG_THRESHOLD) / DOG_THRESHOLD).clamp(0.0, 1.0);
            1.0 - t * t * (3.0 - 2.0 * t)
        })
        .collect();
    ImageTensor::new(1, h, w, data)
}

pub const BLEACH_VALUE: f32 = 1.0;

/// Whitens the background (`invert = false`, keeps pixels with mask > 0.5) or
/// the foreground (`invert = true`, keeps pixels with mask <= 0.5).
pub fn bleach_background(color: &ImageTensor, mask: &ImageTensor, invert: bool) -> Result<ImageTensor> {
    if mask.channels() != 1 || mask.height() != color.height() || mask.width() != color.width() {
        return Err(Error::shape("bleach_background: mask must be 1-channel and aligned"));
    }
    Ok(ImageTensor::from_fn(color.channels(), color.height(), color.width(), |c, y, x| {
        let fg = mask.get(0, y, x) > 0.5;
        if fg != invert {
            color.get(c, y, x)
        } else {
            BLEACH_VALUE
        }
    }))
}

/// Union of sketch and reference foreground masks.
pub fn merge_character_masks(sketch_mask: &ImageTensor, reference_mask: &ImageTensor) -> Result<ImageTensor> {
    sketch_mask.ensure_same_shape(reference_mask, "merge_character_masks")?;
    let data = sketch_mask
        .data()
        .iter()
        .zip(reference_mask.data())
        .map(|(a, b)| a.max(*b))
        .collect();
    ImageTensor::new(1, sketch_mask.height(), sketch_mask.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Normal CDF by Simpson integration of the density; independent of the blur code.
    fn phi(x: f64) -> f64 {
        let n = 2000;
        let (a, b) = (0.0, x.abs());
        let h = (b - a) / n as f64;
        let f = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let half = s * h / 3.0;
        if x >= 0.0 {
            0.5 + half
        } else {
            0.5 - half
        }
    }

    #[test]
    fn constant_image_gives_white_sketch() {
        let img = ImageTensor::filled(3, 32, 32, 0.37);
        let s = extract_sketch(&img).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn step_edge_gives_line_at_boundary_only() {
        let n = 64;
        let img = ImageTensor::from_fn(3, n, n, |_, _, x| if x < n / 2 { 0.0 } else { 1.0 });
        let s = extract_sketch(&img).unwrap();
        let (s1, s2) = (DOG_SIGMA as f64, (DOG_SIGMA * DOG_SIGMA_RATIO) as f64);
        for x in 0..n {
            // signed distance of the pixel center from the edge at x = n/2
            let d = (x as f64 + 0.5 - (n / 2) as f64).abs();
            let oracle = phi(d / s1) - phi(d / s2);
            let v = s.get(0, n / 2, x);
            if oracle > 2.0 * DOG_THRESHOLD as f64 + 0.01 {
                assert!(v < 0.5, "x={x} expected line, got {v}");
            }
            if d > 3.0 {
                assert!(oracle < DOG_THRESHOLD as f64);
                assert!(v >= 0.9, "x={x} expected white, got {v}");
            }
        }
        assert!(s.get(0, 10, n / 2) < 0.5 && s.get(0, 10, n / 2 - 1) < 0.5);
    }

    #[test]
    fn bleach_cases() {
        let color = ImageTensor::from_fn(3, 4, 4, |c, y, x| (c + y + x) as f32 / 12.0);
        let ones = ImageTensor::filled(1, 4, 4, 1.0);
        assert_eq!(bleach_background(&color, &ones, false).unwrap(), color);
        assert!(bleach_background(&color, &ones, true).unwrap().data().iter().all(|&v| v == 1.0));
        let half = ImageTensor::from_fn(1, 4, 4, |_, _, x| if x < 2 { 1.0 } else { 0.0 });
        for invert in [false, true] {
            let out = bleach_background(&color, &half, invert).unwrap();
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        let keep = (x < 2) != invert;
                        let want = if keep { color.get(c, y, x) } else { 1.0 };
                        assert_eq!(out.get(c, y, x), want);
                    }
                }
            }
        }
        assert!(bleach_background(&color, &ImageTensor::filled(1, 3, 4, 1.0), false).is_err());
    }

    #[test]
    fn merge_with_empty_reference_is_identity() {
        let m = ImageTensor::from_fn(1, 5, 5, |_, y, x| ((y * 5 + x) % 3) as f32 / 2.0);
        let z = ImageTensor::filled(1, 5, 5, 0.0);
        assert_eq!(merge_character_masks(&m, &z).unwrap(), m);
    }

    #[test]
    fn merge_disjoint_disks_is_union() {
        let disk = |cx: f32| {
            ImageTensor::from_fn(1, 16, 16, move |_, y, x| {
                let (u, v) = (x as f32 - cx, y as f32 - 8.0);
                if u * u + v * v <= 9.0 { 1.0 } else { 0.0 }
            })
        };
        let (a, b) = (disk(4.0), disk(12.0));
        let m = merge_character_masks(&a, &b).unwrap();
        for i in 0..256 {
            let want = if a.data()[i] == 1.0 || b.data()[i] == 1.0 { 1.0 } else { 0.0 };
            assert_eq!(m.data()[i], want);
        }
    }

    proptest! {
        #[test]
        fn merge_dominates_inputs(a in proptest::collection::vec(0.0f32..=1.0, 36),
                                  b in proptest::collection::vec(0.0f32..=1.0, 36)) {
            let ma = ImageTensor::new(1, 6, 6, a).unwrap();
            let mb = ImageTensor::new(1, 6, 6, b).unwrap();
            let m = merge_character_masks(&ma, &mb).unwrap();
            for i in 0..36 {
                prop_assert!(m.data()[i] >= ma.data()[i] && m.data()[i] >= mb.data()[i]);
            }
        }

        #[test]
        fn sketch_of_bleached_scene_in_range(seed in 0u64..50) {
            let t = gen_synthetic_triple(&SceneSpec::random(seed, 24), "p").unwrap();
            for invert in [false, true] {
                let b = bleach_background(&t.color, &t.mask, invert).unwrap();
                let s = extract_sketch(&b).unwrap();
                prop_assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
