//! Inference modes and end-to-end colorization.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::bleach_background;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::injection::{token_flags, InjectionBundle, MaskPyramid, Thresholds};
use crate::model::{Conditioning, Model};
use crate::params::GroupSet;
use crate::sampler::{sample, seeded_normal, GuidanceConfig, SamplerKind, SamplerOptions};
use crate::training::StageId;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Backbone and reference tokens only.
    Vanilla,
    /// Adds the style encoder and style modulation.
    Style,
    /// Adds the background encoder, background injection and split attention.
    Background,
    /// Style and background together.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Vanilla, Mode::Style, Mode::Background, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Style => "style",
            Mode::Background => "background",
            Mode::Full => "full",
        }
    }

    pub fn uses_background(self) -> bool {
        matches!(self, Mode::Background | Mode::Full)
    }

    pub fn uses_style(self) -> bool {
        matches!(self, Mode::Style | Mode::Full)
    }

    /// Training stage a checkpoint must have completed to serve this mode.
    pub fn required_stage(self) -> StageId {
        match self {
            Mode::Vanilla => StageId::S0,
            Mode::Background => StageId::S2,
            Mode::Style | Mode::Full => StageId::S3,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}` (expected vanilla, style, background or full)")))
    }
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub sketch: ImageTensor,
    pub reference: ImageTensor,
    pub sketch_mask: Option<ImageTensor>,
    pub reference_mask: Option<ImageTensor>,
    pub mode: Mode,
    pub thresholds: Thresholds,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
    pub sampler: SamplerKind,
}

impl InferenceRequest {
    pub fn new(sketch: ImageTensor, reference: ImageTensor, mode: Mode) -> Self {
        Self {
            sketch,
            reference,
            sketch_mask: None,
            reference_mask: None,
            mode,
            thresholds: Thresholds::default(),
            guidance: DEFAULT_GUIDANCE,
            steps: DEFAULT_STEPS,
            seed: 0,
            sampler: SamplerKind::Ddim,
        }
    }

    pub fn with_masks(mut self, sketch_mask: ImageTensor, reference_mask: ImageTensor) -> Self {
        self.sketch_mask = Some(sketch_mask);
        self.reference_mask = Some(reference_mask);
        self
    }

    fn options(&self) -> SamplerOptions {
        SamplerOptions { steps: self.steps, guidance: GuidanceConfig { scale: self.guidance }, kind: self.sampler }
    }

    /// Checks shapes against the model size and resizes the reference side.
    fn prepared(&self, size: usize, factor: usize) -> Result<Prepared> {
        let s = &self.sketch;
        if s.channels() != 1 {
            return Err(Error::shape("sketch must have one channel"));
        }
        if s.height() % factor != 0 || s.width() % factor != 0 {
            return Err(Error::shape(format!("sketch size {}x{} not divisible by {factor}", s.height(), s.width())));
        }
        if s.height() != size || s.width() != size {
            return Err(Error::shape(format!("sketch must be {size}x{size}, got {}x{}", s.height(), s.width())));
        }
        if self.reference.channels() != 3 {
            return Err(Error::shape("reference must have three channels"));
        }
        self.thresholds.validate()?;
        let reference = self.reference.resize(size, size);
        let masks = if self.mode.uses_background() {
            let (sm, rm) = match (&self.sketch_mask, &self.reference_mask) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::invalid(format!("{} mode needs both a sketch mask and a reference mask", self.mode))),
            };
            if sm.channels() != 1 || rm.channels() != 1 || sm.height() != size || sm.width() != size {
                return Err(Error::shape("masks must be one-channel and the sketch mask must match the sketch"));
            }
            if rm.height() != self.reference.height() || rm.width() != self.reference.width() {
                return Err(Error::shape("reference mask must match the reference"));
            }
            Some((sm.clone(), rm.resize(size, size)))
        } else {
            None
        };
        Ok(Prepared { reference, masks })
    }
}

struct Prepared {
    reference: ImageTensor,
    masks: Option<(ImageTensor, ImageTensor)>,
}

fn stack(images: &[&ImageTensor], model: &Model) -> Result<Tensor> {
    ImageTensor::stack_nhwc(images, model.dtype(), model.device())
}

fn assemble(
    mode: Mode,
    thresholds: Thresholds,
    prepared: &[Prepared],
    reference: &Tensor,
    model: &Model,
) -> Result<InjectionBundle> {
    let mut bundle = InjectionBundle { thresholds, ..InjectionBundle::empty() };
    if mode.uses_style() {
        let emb = model.embedder.embed(reference)?;
        bundle.z_style = Some(model.encode_style(&model.vae.encode(reference)?, &emb)?);
    }
    if mode.uses_background() {
        let masks: Vec<&(ImageTensor, ImageTensor)> = prepared.iter().map(|p| p.masks.as_ref().expect("validated")).collect();
        let bleached = prepared
            .iter()
            .zip(&masks)
            .map(|(p, (_, rm))| bleach_background(&p.reference, rm, true))
            .collect::<Result<Vec<_>>>()?;
        let src = stack(&bleached.iter().collect::<Vec<_>>(), model)?;
        let e_bg = model.embedder.embed(&src)?;
        bundle.z_bg = Some(model.encode_background(&model.vae.encode(&src)?, &e_bg)?);
        let sketch_masks: Vec<&ImageTensor> = masks.iter().map(|(sm, _)| sm).collect();
        bundle.sketch_masks = Some(MaskPyramid::build(&sketch_masks, &model.config.level_sizes(), model.dtype(), model.device())?);
        bundle.token_flags = Some(
            masks
                .iter()
                .map(|(_, rm)| token_flags(rm, model.config.embed_grid, thresholds.reference))
                .collect::<Result<_>>()?,
        );
        bundle.lora_active = true;
        for (i, (no_fg, no_bg)) in bundle.fallback_partitions().into_iter().enumerate() {
            if no_fg || no_bg {
                log::info!(
                    "request {i}: reference has no {} tokens; that query group attends to all tokens",
                    if no_fg { "foreground" } else { "background" }
                );
            }
        }
    }
    Ok(bundle)
}

/// The injection bundle a request's mode calls for; empty for vanilla.
pub fn assemble_injections(req: &InferenceRequest, model: &Model) -> Result<InjectionBundle> {
    let p = req.prepared(model.config.image_size, model.config.vae_factor)?;
    let reference = stack(&[&p.reference], model)?;
    assemble(req.mode, req.thresholds, &[p], &reference, model)
}

/// Colorizes several requests in one batch. They must share mode, steps,
/// guidance, sampler and thresholds; each keeps its own seed.
pub fn colorize_batch(reqs: &[InferenceRequest], model: &Model) -> Result<Vec<ImageTensor>> {
    let first = match reqs.first() {
        Some(r) => r,
        None => return Ok(Vec::new()),
    };
    if reqs.iter().any(|r| {
        r.mode != first.mode || r.options() != first.options() || r.thresholds != first.thresholds
    }) {
        return Err(Error::invalid("batched requests must share mode, sampler settings and thresholds"));
    }
    let cfg = &model.config;
    let prepared = reqs.iter().map(|r| r.prepared(cfg.image_size, cfg.vae_factor)).collect::<Result<Vec<_>>>()?;
    let reference = stack(&prepared.iter().map(|p| &p.reference).collect::<Vec<_>>(), model)?;
    let sketch = stack(&reqs.iter().map(|r| &r.sketch).collect::<Vec<_>>(), model)?;
    let tokens = model.embedder.embed(&reference)?.local;
    let bundle = assemble(first.mode, first.thresholds, &prepared, &reference, model)?;
    let cond = Conditioning {
        sketch: model.sketch_encoder.forward(&sketch)?,
        tokens,
        bundle: if bundle.is_vanilla() { None } else { Some(bundle) },
    };
    let null = cond.null()?;
    let l = cfg.latent_size();
    let noise = reqs
        .iter()
        .map(|r| seeded_normal(&[1, l, l, cfg.latent_channels], r.seed, model.dtype(), model.device()))
        .collect::<Result<Vec<_>>>()?;
    let z_init = Tensor::cat(&noise, 0)?;
    let z = sample(model, &cond, &null, &model.schedule, &first.options(), z_init)?;
    ImageTensor::from_nhwc(&model.vae.decode(&z)?)
}

/// Colorizes one request without checking provenance.
pub fn colorize(req: &InferenceRequest, model: &Model) -> Result<ImageTensor> {
    Ok(colorize_batch(std::slice::from_ref(req), model)?.remove(0))
}

/// A loaded checkpoint that refuses modes its training does not cover.
pub struct Colorizer {
    pub checkpoint: Checkpoint,
    pub model: Model,
}

impl Colorizer {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let model = checkpoint.model(GroupSet::EMPTY)?;
        Ok(Self { checkpoint, model })
    }

    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        self.checkpoint.require_stage(mode.required_stage(), &format!("{mode} mode"))
    }

    pub fn colorize(&self, req: &InferenceRequest) -> Result<ImageTensor> {
        self.check_mode(req.mode)?;
        colorize(req, &self.model)
    }

    pub fn colorize_batch(&self, reqs: &[InferenceRequest]) -> Result<Vec<ImageTensor>> {
        if let Some(r) = reqs.first() {
            self.check_mode(r.mode)?;
        }
        colorize_batch(reqs, &self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic_triple, SceneSpec};
    use crate::model::ModelConfig;

    fn setup() -> (Model, crate::datagen::ImageTriple) {
        let ck = Checkpoint::init(&ModelConfig::tiny(), 3).unwrap();
        let t = gen_synthetic_triple(&SceneSpec::random(5, 32), "x").unwrap();
        (ck.model(GroupSet::EMPTY).unwrap(), t)
    }

    fn req(t: &crate::datagen::ImageTriple, mode: Mode) -> InferenceRequest {
        InferenceRequest { steps: 3, ..InferenceRequest::new(t.sketch.clone(), t.color.clone(), mode) }
            .with_masks(t.mask.clone(), t.mask.clone())
    }

    #[test]
    fn bundles_per_mode() {
        let (m, t) = setup();
        assert!(assemble_injections(&req(&t, Mode::Vanilla), &m).unwrap().is_vanilla());
        let full = assemble_injections(&req(&t, Mode::Full), &m).unwrap();
        assert!(full.z_bg.is_some() && full.z_style.is_some() && full.sketch_masks.is_some() && full.token_flags.is_some());
        let style = assemble_injections(&req(&t, Mode::Style), &m).unwrap();
        assert!(style.z_bg.is_none() && style.z_style.is_some());
        let mut r = req(&t, Mode::Background);
        r.reference_mask = Some(ImageTensor::filled(1, 32, 32, 1.0));
        let b = assemble_injections(&r, &m).unwrap();
        assert!(b.token_flags.as_ref().unwrap()[0].iter().all(|&f| f));
        assert_eq!(b.fallback_partitions(), vec![(false, true)]);
        r.sketch_mask = None;
        assert!(assemble_injections(&r, &m).is_err());
    }

    #[test]
    fn colorize_shape_determinism_and_mask_independence() {
        let (m, t) = setup();
        let a = colorize(&req(&t, Mode::Vanilla), &m).unwrap();
        assert_eq!((a.channels(), a.height(), a.width()), (3, 32, 32));
        let mut no_masks = req(&t, Mode::Vanilla);
        no_masks.sketch_mask = None;
        no_masks.reference_mask = None;
        assert_eq!(colorize(&no_masks, &m).unwrap(), a);
        let mut other = req(&t, Mode::Vanilla);
        other.seed = 1;
        assert_ne!(colorize(&other, &m).unwrap(), a);
    }

    #[test]
    fn zero_init_background_matches_vanilla() {
        let (m, t) = setup();
        let v = colorize(&req(&t, Mode::Vanilla), &m).unwrap();
        let b = colorize(&req(&t, Mode::Background), &m).unwrap();
        assert_eq!(v, b);
    }

    #[test]
    fn provenance_gates_modes() {
        let mut ck = Checkpoint::init(&ModelConfig::tiny(), 3).unwrap();
        ck.provenance.stages_completed = vec![StageId::S0, StageId::S1a, StageId::S1b];
        let c = Colorizer::new(ck).unwrap();
        assert!(c.check_mode(Mode::Vanilla).is_ok());
        assert!(matches!(c.check_mode(Mode::Style), Err(Error::Provenance(_))));
        assert!(matches!(c.check_mode(Mode::Background), Err(Error::Provenance(_))));
        assert_eq!("full".parse::<Mode>().unwrap(), Mode::Full);
    }
}
