use rand::Rng;

use crate::datagen::{bleach_background, merge_character_masks, ImageTriple};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::training::StageId;

/// Resize target before cropping, preserving the 800 → 768 ratio.
pub fn resize_crop_target(image_size: usize) -> usize {
    (image_size * 800).div_ceil(768)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// One training batch. Sketch, color and mask share a crop window; the
/// reference is the color image resized directly, without cropping.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub ids: Vec<String>,
    pub sketch: Vec<ImageTensor>,
    pub color: Vec<ImageTensor>,
    pub mask: Vec<ImageTensor>,
    pub reference: Vec<ImageTensor>,
    pub reference_mask: Vec<ImageTensor>,
    pub crops: Vec<CropWindow>,
    /// Reference with its merged foreground whitened (stages 2 and 3).
    pub background_source: Option<Vec<ImageTensor>>,
    pub merged_mask: Option<Vec<ImageTensor>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn make_training_batch<R: Rng>(
    triples: &[&ImageTriple],
    stage: StageId,
    rng: &mut R,
    image_size: usize,
) -> Result<TrainingBatch> {
    let target = resize_crop_target(image_size);
    let with_background = matches!(stage, StageId::S2 | StageId::S3);
    let mut b = TrainingBatch {
        ids: Vec::with_capacity(triples.len()),
        sketch: Vec::new(),
        color: Vec::new(),
        mask: Vec::new(),
        reference: Vec::new(),
        reference_mask: Vec::new(),
        crops: Vec::new(),
        background_source: with_background.then(Vec::new),
        merged_mask: with_background.then(Vec::new),
    };
    for t in triples {
        let (h, w) = (t.color.height(), t.color.width());
        if h < image_size || w < image_size {
            return Err(Error::invalid(format!(
                "triple {} is {h}x{w}, smaller than the {image_size} crop",
                t.id
            )));
        }
        let top = rng.random_range(0..=target - image_size);
        let left = rng.random_range(0..=target - image_size);
        let crop = |im: &ImageTensor| im.resize(target, target).crop(top, left, image_size, image_size);
        let sketch = crop(&t.sketch)?;
        let color = crop(&t.color)?;
        let mask = crop(&t.mask)?;
        let reference = t.color.resize(image_size, image_size);
        let reference_mask = t.mask.resize(image_size, image_size);
        if let (Some(src), Some(merged)) = (b.background_source.as_mut(), b.merged_mask.as_mut()) {
            let m = merge_character_masks(&mask, &reference_mask)?;
            src.push(bleach_background(&reference, &m, true)?);
            merged.push(m);
        }
        b.ids.push(t.id.clone());
        b.sketch.push(sketch);
        b.color.push(color);
        b.mask.push(mask);
        b.reference.push(reference);
        b.reference_mask.push(reference_mask);
        b.crops.push(CropWindow { top, left, size: image_size });
    }
    Ok(b)
}
