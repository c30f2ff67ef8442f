use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Group, GroupSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    /// Autoencoder pretraining.
    #[serde(rename = "0")]
    S0,
    /// Backbone with a high reference-drop rate.
    #[serde(rename = "1a")]
    S1a,
    /// Backbone refinement with a lower drop rate.
    #[serde(rename = "1b")]
    S1b,
    /// Background encoder, background injection and split-attention LoRAs.
    #[serde(rename = "2")]
    S2,
    /// Style encoder and style injection.
    #[serde(rename = "3")]
    S3,
}

impl StageId {
    pub const ALL: [StageId; 5] = [StageId::S0, StageId::S1a, StageId::S1b, StageId::S2, StageId::S3];

    pub fn name(self) -> &'static str {
        match self {
            StageId::S0 => "0",
            StageId::S1a => "1a",
            StageId::S1b => "1b",
            StageId::S2 => "2",
            StageId::S3 => "3",
        }
    }

    /// The stage that must already be completed before this one may run.
    pub fn prerequisite(self) -> Option<StageId> {
        match self {
            StageId::S0 => None,
            StageId::S1a => Some(StageId::S0),
            StageId::S1b => Some(StageId::S1a),
            StageId::S2 => Some(StageId::S1b),
            StageId::S3 => Some(StageId::S2),
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StageId::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}` (expected 0, 1a, 1b, 2 or 3)")))
    }
}

/// Parameter groups updated by a stage. The embedder is never trainable.
pub fn select_trainable(stage: StageId) -> GroupSet {
    match stage {
        StageId::S0 => GroupSet::of(&[Group::Vae]),
        StageId::S1a | StageId::S1b => GroupSet::of(&[Group::Unet, Group::SketchEncoder]),
        StageId::S2 => GroupSet::of(&[Group::BgEncoder, Group::BgInjection, Group::LoraSplitAttn]),
        StageId::S3 => GroupSet::of(&[Group::StyleEncoder, Group::StyleInjection]),
    }
}

/// Per-sample replacement of reference tokens by zeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropPolicy {
    pub rate: f64,
}

impl DropPolicy {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::invalid(format!("drop rate {rate} outside [0, 1]")));
        }
        Ok(Self { rate })
    }

    /// One Bernoulli draw per sample; true means dropped.
    pub fn draw<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<bool> {
        (0..batch).map(|_| rng.random_bool(self.rate)).collect()
    }
}

/// Replaces the tokens of dropped samples with zeros. Returns the new
/// tokens and the per-sample drop decisions.
pub fn apply_reference_drop<R: Rng>(tokens: &Tensor, policy: &DropPolicy, rng: &mut R) -> Result<(Tensor, Vec<bool>)> {
    let b = tokens.dim(0)?;
    let dropped = policy.draw(b, rng);
    if !dropped.iter().any(|&d| d) {
        return Ok((tokens.clone(), dropped));
    }
    let keep: Vec<f32> = dropped.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, tokens.rank() - 1));
    let keep = Tensor::from_vec(keep, shape, tokens.device())?.to_dtype(tokens.dtype())?;
    Ok((tokens.broadcast_mul(&keep)?, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageId,
    pub reference_drop_rate: f64,
    /// Probability per sample that the background branch is active (stage 3).
    pub bg_branch_activation_rate: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl StageConfig {
    pub fn default_for(stage: StageId) -> Self {
        let (drop, lr) = match stage {
            StageId::S0 => (0.0, 1e-3),
            StageId::S1a => (0.8, 1e-4),
            StageId::S1b | StageId::S2 | StageId::S3 => (0.5, 1e-4),
        };
        Self {
            stage,
            reference_drop_rate: drop,
            bg_branch_activation_rate: if stage == StageId::S3 { 0.5 } else { 0.0 },
            steps: 1000,
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_size: 8,
            seed: 0,
            log_every: 50,
        }
    }

    pub fn trainable(&self) -> GroupSet {
        select_trainable(self.stage)
    }

    pub fn drop_policy(&self) -> Result<DropPolicy> {
        DropPolicy::new(self.reference_drop_rate)
    }

    /// Per-sample activation of the background branch; true means active.
    pub fn draw_bg_activation<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<bool> {
        (0..batch).map(|_| rng.random_bool(self.bg_branch_activation_rate)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (n, v) in [("reference_drop_rate", self.reference_drop_rate), ("bg_branch_activation_rate", self.bg_branch_activation_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{n} = {v} outside [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn trainable_sets() {
        assert_eq!(select_trainable(StageId::S2).names(), vec!["bg_encoder", "bg_injection", "lora_split_attn"]);
        assert!(!select_trainable(StageId::S3).contains(Group::BgEncoder));
        assert_eq!(select_trainable(StageId::S1a), select_trainable(StageId::S1b));
        for s in StageId::ALL {
            assert!(!select_trainable(s).contains(Group::Embedder));
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in StageId::ALL {
            assert_eq!(s.name().parse::<StageId>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("4".parse::<StageId>().is_err());
    }

    #[test]
    fn drop_extremes_and_zeroing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(DropPolicy::new(1.0).unwrap().draw(100, &mut rng).iter().all(|&d| d));
        assert!(DropPolicy::new(0.0).unwrap().draw(100, &mut rng).iter().all(|&d| !d));
        assert!(DropPolicy::new(1.5).is_err());
        let t = Tensor::ones((3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let (out, d) = apply_reference_drop(&t, &DropPolicy { rate: 1.0 }, &mut rng).unwrap();
        assert_eq!(d, vec![true; 3]);
        assert!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
        let (out, _) = apply_reference_drop(&t, &DropPolicy { rate: 0.0 }, &mut rng).unwrap();
        assert!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_rate_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let k = DropPolicy::new(0.5).unwrap().draw(n, &mut rng).iter().filter(|&&d| d).count();
        let f = k as f64 / n as f64;
        assert!((0.48..=0.52).contains(&f), "{f}");
    }
}
