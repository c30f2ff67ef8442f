//! Deterministic samplers (DDIM with η = 0, and DPM-Solver++ 2M) with
//! classifier-free guidance.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{cfg_combine, NoiseSchedule};

/// An ε-predictor conditioned on some `Cond`.
pub trait Denoiser {
    type Cond;
    fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &Self::Cond) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddim,
    DpmSolver2m,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::DpmSolver2m => "dpm2m",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "dpm2m" | "dpm++2m" => Ok(SamplerKind::DpmSolver2m),
            _ => Err(Error::invalid(format!("unknown sampler `{s}` (expected ddim or dpm2m)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub kind: SamplerKind,
}

/// `steps` timesteps evenly spaced from `T − 1` down to 0.
pub fn sampling_timesteps(schedule_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > schedule_len {
        return Err(Error::invalid(format!("steps must be in [1, {schedule_len}], got {steps}")));
    }
    let last = (schedule_len - 1) as f64;
    if steps == 1 {
        return Ok(vec![schedule_len - 1]);
    }
    Ok((0..steps)
        .map(|i| (last * (1.0 - i as f64 / (steps - 1) as f64)).round() as usize)
        .collect())
}

/// Standard-normal tensor drawn from a seeded ChaCha stream.
pub fn seeded_normal(shape: &[usize], seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Guided ε: the unconditional pass is skipped when the scale is exactly 1.
pub fn guided_eps<M: Denoiser>(
    model: &M,
    z: &Tensor,
    t: usize,
    cond: &M::Cond,
    null_cond: &M::Cond,
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    let eps_c = model.predict_eps(z, t, cond)?;
    if guidance.scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = model.predict_eps(z, t, null_cond)?;
    cfg_combine(&eps_u, &eps_c, guidance.scale)
}

/// Runs the reverse process from `z_init` (pure noise at `T − 1`) to a
/// clean latent. The final update targets ᾱ = 1, i.e. returns the predicted
/// clean sample.
pub fn sample<M: Denoiser>(
    model: &M,
    cond: &M::Cond,
    null_cond: &M::Cond,
    schedule: &NoiseSchedule,
    opts: &SamplerOptions,
    z_init: Tensor,
) -> Result<Tensor> {
    let ts = sampling_timesteps(schedule.len(), opts.steps)?;
    let mut z = z_init;
    let mut prev_x0: Option<(Tensor, f64)> = None;
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let ab_next = match ts.get(i + 1) {
            Some(&tn) => schedule.alpha_bar(tn)?,
            None => 1.0,
        };
        let eps = guided_eps(model, &z, t, cond, null_cond, &opts.guidance)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = ((&z - (&eps * s)?)? / a)?;
        let (a_n, s_n) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        z = match opts.kind {
            SamplerKind::Ddim => {
                if ab_next == 1.0 {
                    x0.clone()
                } else {
                    ((&x0 * a_n)? + (&eps * s_n)?)?
                }
            }
            SamplerKind::DpmSolver2m => {
                let lambda = (a / s).ln();
                if s_n == 0.0 {
                    // Last step: λ → ∞, the update collapses to the data prediction.
                    x0.clone()
                } else {
                    let lambda_n = (a_n / s_n).ln();
                    let h = lambda_n - lambda;
                    let d = match &prev_x0 {
                        Some((x0_prev, h_prev)) => {
                            let r = h_prev / h;
                            ((&x0 * (1.0 + 0.5 / r))? - (x0_prev * (0.5 / r))?)?
                        }
                        None => x0.clone(),
                    };
                    ((&z * (s_n / s))? - (d * (a_n * ((-h).exp() - 1.0)))?)?
                }
            }
        };
        if z.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler produced non-finite latent at t={t}")));
        }
        if let Some(&tn) = ts.get(i + 1) {
            let lambda = (a / s).ln();
            let abn = schedule.alpha_bar(tn)?;
            let lambda_n = (abn.sqrt() / (1.0 - abn).sqrt()).ln();
            prev_x0 = Some((x0, lambda_n - lambda));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    /// Knows the clean sample, so it can return the exact noise for any z_t.
    struct Oracle {
        z0: Tensor,
        schedule: NoiseSchedule,
        null_calls: Cell<usize>,
    }

    impl Denoiser for Oracle {
        type Cond = bool;
        fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &bool) -> Result<Tensor> {
            if !cond {
                self.null_calls.set(self.null_calls.get() + 1);
            }
            let ab = self.schedule.alpha_bar(t)?;
            Ok(((z_t - (&self.z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        }
    }

    fn oracle() -> Oracle {
        let dev = Device::Cpu;
        Oracle {
            z0: Tensor::new(&[[0.5f64, -1.25, 2.0]], &dev).unwrap(),
            schedule: NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
            null_calls: Cell::new(0),
        }
    }

    #[test]
    fn timesteps_span_schedule() {
        assert_eq!(sampling_timesteps(1000, 1).unwrap(), vec![999]);
        assert_eq!(sampling_timesteps(1000, 2).unwrap(), vec![999, 0]);
        let ts = sampling_timesteps(1000, 50).unwrap();
        assert_eq!((ts[0], *ts.last().unwrap(), ts.len()), (999, 0, 50));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(sampling_timesteps(10, 11).is_err());
        assert!(sampling_timesteps(10, 0).is_err());
    }

    #[test]
    fn exact_denoiser_recovers_clean_sample() {
        let o = oracle();
        let z_init = seeded_normal(&[1, 3], 9, DType::F64, &Device::Cpu).unwrap();
        for kind in [SamplerKind::Ddim, SamplerKind::DpmSolver2m] {
            for steps in [1, 7, 50] {
                let opts = SamplerOptions { steps, guidance: GuidanceConfig { scale: 1.0 }, kind };
                let z = sample(&o, &true, &false, &o.schedule, &opts, z_init.clone()).unwrap();
                let got = z.to_vec2::<f64>().unwrap()[0].clone();
                for (g, w) in got.iter().zip([0.5, -1.25, 2.0]) {
                    assert!((g - w).abs() < 1e-9, "{kind} steps={steps}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn unit_guidance_skips_unconditional_pass() {
        let o = oracle();
        let z_init = seeded_normal(&[1, 3], 1, DType::F64, &Device::Cpu).unwrap();
        let opts = SamplerOptions { steps: 5, guidance: GuidanceConfig { scale: 1.0 }, kind: SamplerKind::Ddim };
        sample(&o, &true, &false, &o.schedule, &opts, z_init.clone()).unwrap();
        assert_eq!(o.null_calls.get(), 0);
        let opts = SamplerOptions { guidance: GuidanceConfig { scale: 3.0 }, ..opts };
        sample(&o, &true, &false, &o.schedule, &opts, z_init).unwrap();
        assert_eq!(o.null_calls.get(), 5);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let a = seeded_normal(&[2, 4], 5, DType::F32, &Device::Cpu).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = seeded_normal(&[2, 4], 5, DType::F32, &Device::Cpu).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let c = seeded_normal(&[2, 4], 6, DType::F32, &Device::Cpu).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampler_names_parse() {
        assert_eq!("ddim".parse::<SamplerKind>().unwrap(), SamplerKind::Ddim);
        assert_eq!("dpm2m".parse::<SamplerKind>().unwrap(), SamplerKind::DpmSolver2m);
        assert!("euler".parse::<SamplerKind>().is_err());
    }
}
