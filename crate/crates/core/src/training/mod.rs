//! Staged training: trainable-group selection, reference drop, the
//! optimization step and the per-stage driver with freezing audits.

mod stage;

pub use stage::{apply_reference_drop, select_trainable, DropPolicy, StageConfig, StageId};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::datagen::{make_training_batch, ImageTriple, TrainingBatch};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::injection::{token_flags, InjectionBundle, MaskPyramid, Thresholds};
use crate::model::{Model, UNET_ENCODER_PREFIX};
use crate::params::Group;
use crate::sampler::seeded_normal;
use crate::schedule::{diffuse, diffusion_loss};

/// Weight of the KL term during autoencoder pretraining.
pub const VAE_KL_WEIGHT: f64 = 1e-6;
const ADAM_EPS: f64 = 1e-8;

fn stack(images: &[ImageTensor], model: &Model) -> Result<Tensor> {
    ImageTensor::stack_nhwc(&images.iter().collect::<Vec<_>>(), model.dtype(), model.device())
}

/// Background-branch inputs for a batch. Samples with `active[i] == false`
/// get an all-foreground mask and all-foreground tokens, which makes both the
/// gate and split attention pass their input through unchanged.
pub fn background_bundle(
    model: &Model,
    batch: &TrainingBatch,
    active: &[bool],
    thresholds: Thresholds,
) -> Result<InjectionBundle> {
    let src = batch
        .background_source
        .as_ref()
        .ok_or_else(|| Error::invalid("batch carries no background source; build it for stage 2 or 3"))?;
    let x = stack(src, model)?;
    let z = model.vae.encode(&x)?;
    let e_bg = model.embedder.embed(&x)?;
    let z_bg = model.encode_background(&z, &e_bg)?;
    let size = model.config.image_size;
    let ones = ImageTensor::filled(1, size, size, 1.0);
    let masks: Vec<&ImageTensor> = batch.mask.iter().zip(active).map(|(m, &a)| if a { m } else { &ones }).collect();
    let pyramid = MaskPyramid::build(&masks, &model.config.level_sizes(), model.dtype(), model.device())?;
    let flags = batch
        .reference_mask
        .iter()
        .zip(active)
        .map(|(m, &a)| {
            if a {
                token_flags(m, model.config.embed_grid, thresholds.reference)
            } else {
                Ok(vec![true; model.config.num_tokens()])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InjectionBundle {
        z_bg: Some(z_bg),
        z_style: None,
        sketch_masks: Some(pyramid),
        token_flags: Some(flags),
        thresholds,
        lora_active: true,
    })
}

/// Scalar training loss for one batch. All randomness is drawn from `rng`.
pub fn stage_loss<R: Rng>(model: &Model, batch: &TrainingBatch, cfg: &StageConfig, rng: &mut R) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let needs_bg = matches!(cfg.stage, StageId::S2 | StageId::S3);
    if needs_bg != batch.background_source.is_some() {
        return Err(Error::invalid(format!("batch was not built for stage {}", cfg.stage)));
    }
    let dev = model.device().clone();
    let n = batch.len();
    if cfg.stage == StageId::S0 {
        let picks: Vec<ImageTensor> =
            (0..n).map(|i| if rng.random_bool(0.5) { batch.reference[i].clone() } else { batch.color[i].clone() }).collect();
        let x = stack(&picks, model)?;
        let l = model.config.latent_size();
        let noise = seeded_normal(&[n, l, l, model.config.latent_channels], rng.random(), model.dtype(), &dev)?;
        let out = model.vae.forward_train(&x, &noise)?;
        let rec = (out.reconstruction - &x)?.sqr()?.mean_all()?;
        return Ok((rec + (out.kl * VAE_KL_WEIGHT)?)?);
    }

    let z0 = model.vae.encode(&stack(&batch.color, model)?)?;
    let eps = seeded_normal(z0.dims(), rng.random(), model.dtype(), &dev)?;
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..model.schedule.len())).collect();
    let z_t = diffuse(&z0, &eps, &t, &model.schedule)?;
    let reference = stack(&batch.reference, model)?;
    let emb = model.embedder.embed(&reference)?;
    let (tokens, _) = apply_reference_drop(&emb.local, &cfg.drop_policy()?, rng)?;
    let sketch = model.sketch_encoder.forward(&stack(&batch.sketch, model)?)?;
    let thresholds = Thresholds::default();
    let bundle = match cfg.stage {
        StageId::S2 => Some(background_bundle(model, batch, &vec![true; n], thresholds)?),
        StageId::S3 => {
            let active = cfg.draw_bg_activation(n, rng);
            let mut b = if active.iter().any(|&a| a) {
                background_bundle(model, batch, &active, thresholds)?
            } else {
                InjectionBundle { thresholds, ..InjectionBundle::empty() }
            };
            b.z_style = Some(model.encode_style(&model.vae.encode(&reference)?, &emb)?);
            Some(b)
        }
        _ => None,
    };
    let eps_hat = model.unet.forward(&z_t, &t, &sketch, &tokens, bundle.as_ref())?;
    diffusion_loss(&eps_hat, &eps)
}

pub fn make_optimizer(model_ck: &Checkpoint, cfg: &StageConfig) -> Result<AdamW> {
    let vars = model_ck.params.vars_in(cfg.trainable());
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: ADAM_EPS,
            weight_decay: cfg.weight_decay,
        },
    )?)
}

/// One optimizer update on the stage's trainable groups; returns the loss.
pub fn train_step<R: Rng>(
    model: &Model,
    batch: &TrainingBatch,
    cfg: &StageConfig,
    rng: &mut R,
    opt: &mut AdamW,
) -> Result<f64> {
    let loss = stage_loss(model, batch, cfg, rng)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "stage {} loss is {value} for batch [{}]",
            cfg.stage,
            batch.ids.join(", ")
        )));
    }
    opt.backward_step(&loss)?;
    Ok(value)
}

/// Losses of a finished stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: StageId,
    pub losses: Vec<f64>,
}

/// Rejects stages whose prerequisite is missing or that would run after a later stage.
pub fn check_stage_order(ck: &Checkpoint, stage: StageId) -> Result<()> {
    if let Some(p) = stage.prerequisite() {
        ck.require_stage(p, &format!("stage {stage}"))?;
    }
    if let Some(later) = ck.provenance.stages_completed.iter().find(|s| **s > stage) {
        return Err(Error::Provenance(format!("stage {stage} cannot run after stage {later} has completed")));
    }
    Ok(())
}

/// Copies the U-Net encoder into the auxiliary encoder a stage trains, the
/// first time that stage runs.
pub fn enter_stage(ck: &Checkpoint, stage: StageId) -> Result<()> {
    let target = match stage {
        StageId::S2 => Group::BgEncoder,
        StageId::S3 => Group::StyleEncoder,
        _ => return Ok(()),
    };
    if !ck.has_stage(stage) {
        ck.params.copy_prefix(UNET_ENCODER_PREFIX, target.name())?;
    }
    Ok(())
}

/// Sets the latent scale so encoded training images have unit variance.
fn calibrate_latent_scale(ck: &Checkpoint, model: &Model, dataset: &[ImageTriple]) -> Result<f64> {
    let size = model.config.image_size;
    let images: Vec<ImageTensor> = dataset.iter().map(|t| t.color.resize(size, size)).collect();
    let z = model.vae.encode_unscaled(&stack(&images, model)?)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::NonFinite(format!("latent std {std}")));
    }
    let scale = 1.0 / std;
    ck.params.set("vae.latent_scale", &Tensor::new(&[scale as f32], &candle_core::Device::Cpu)?)?;
    Ok(scale)
}

/// Runs one stage on `ck` in place: order check, entry initialization,
/// `cfg.steps` updates, freezing audit and provenance update.
pub fn run_stage(
    cfg: &StageConfig,
    dataset: &[ImageTriple],
    ck: &mut Checkpoint,
    mut on_log: impl FnMut(usize, f64),
) -> Result<StageReport> {
    cfg.validate()?;
    check_stage_order(ck, cfg.stage)?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    enter_stage(ck, cfg.stage)?;
    let trainable = cfg.trainable();
    let before = ck.params.checksums()?;
    let model = ck.model(trainable)?;
    let mut opt = make_optimizer(ck, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(&dataset[order.pop().expect("refilled")]);
        }
        let batch = make_training_batch(&picked, cfg.stage, &mut rng, ck.config.image_size)?;
        let loss = train_step(&model, &batch, cfg, &mut rng, &mut opt)?;
        losses.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            on_log(step + 1, loss);
        }
    }
    if cfg.stage == StageId::S0 {
        calibrate_latent_scale(ck, &model, dataset)?;
    }
    let after = ck.params.checksums()?;
    for g in trainable.complement().iter() {
        if before[&g] != after[&g] {
            return Err(Error::FrozenGroupChanged(g.name().to_string()));
        }
    }
    let p = &mut ck.provenance;
    if !p.stages_completed.contains(&cfg.stage) {
        p.stages_completed.push(cfg.stage);
    }
    p.stage_seeds.insert(cfg.stage.name().to_string(), cfg.seed);
    *p.stage_steps.entry(cfg.stage.name().to_string()).or_insert(0) += cfg.steps;
    Ok(StageReport { stage: cfg.stage, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic_triple, SceneSpec};
    use crate::model::ModelConfig;

    fn data(n: u64, size: usize) -> Vec<ImageTriple> {
        (0..n).map(|i| gen_synthetic_triple(&SceneSpec::random(i, size), format!("{i}")).unwrap()).collect()
    }

    fn quick(stage: StageId) -> StageConfig {
        StageConfig { steps: 2, batch_size: 2, log_every: 1, ..StageConfig::default_for(stage) }
    }

    #[test]
    fn out_of_order_stages_rejected() {
        let mut ck = Checkpoint::init(&ModelConfig::tiny(), 0).unwrap();
        let d = data(2, 32);
        for s in [StageId::S1a, StageId::S1b, StageId::S2, StageId::S3] {
            assert!(matches!(run_stage(&quick(s), &d, &mut ck, |_, _| {}), Err(Error::Provenance(_))));
        }
        run_stage(&quick(StageId::S0), &d, &mut ck, |_, _| {}).unwrap();
        assert!(matches!(run_stage(&quick(StageId::S2), &d, &mut ck, |_, _| {}), Err(Error::Provenance(_))));
        run_stage(&quick(StageId::S1a), &d, &mut ck, |_, _| {}).unwrap();
        assert!(matches!(run_stage(&quick(StageId::S0), &d, &mut ck, |_, _| {}), Err(Error::Provenance(_))));
    }

    #[test]
    fn stages_log_and_record_provenance() {
        let mut ck = Checkpoint::init(&ModelConfig::tiny(), 0).unwrap();
        let d = data(3, 32);
        let mut logged = Vec::new();
        let r = run_stage(&quick(StageId::S0), &d, &mut ck, |s, l| logged.push((s, l))).unwrap();
        assert_eq!(r.losses.len(), 2);
        assert_eq!(logged.len(), 2);
        assert!(r.losses.iter().all(|l| l.is_finite() && *l > 0.0));
        assert_eq!(ck.provenance.stages_completed, vec![StageId::S0]);
        assert_ne!(ck.model(Default::default()).unwrap().vae.latent_scale().unwrap(), 1.0);
    }
}
