//! Dataset-level evaluation: reference selection, batched colorization and
//! line-delimited metric reports.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{tps_warp, ImageTriple, TpsParams};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::inference::{colorize_batch, InferenceRequest, Mode};
use crate::injection::Thresholds;
use crate::metrics::{embed_cosine, entanglement_score, ms_ssim, psnr, PSNR_CAP_DB};
use crate::model::Model;
use crate::sampler::SamplerKind;

pub const AGGREGATE_ID: &str = "aggregate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    MsSsim,
    EmbedCosine,
    Entanglement,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Psnr, Metric::MsSsim, Metric::EmbedCosine, Metric::Entanglement];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::MsSsim => "ms_ssim",
            Metric::EmbedCosine => "embed_cosine",
            Metric::Entanglement => "entanglement",
        }
    }

    /// Parses a comma-separated list, keeping order and rejecting duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Metric = part.parse()?;
            if out.contains(&m) {
                return Err(Error::invalid(format!("metric `{part}` listed twice")));
            }
            out.push(m);
        }
        if out.is_empty() {
            return Err(Error::invalid("no metrics requested"));
        }
        Ok(out)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}` (expected psnr, ms_ssim, embed_cosine or entanglement)")))
    }
}

/// Where each item's reference comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// The item's own color image deformed by a seeded thin plate spline.
    Tps { grid: usize, magnitude: f64 },
    /// Another item's color image, paired by a seeded derangement.
    Shuffled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub mode: Mode,
    pub metrics: Vec<Metric>,
    pub references: ReferencePolicy,
    pub steps: usize,
    pub guidance: f64,
    pub sampler: SamplerKind,
    pub thresholds: Thresholds,
    pub seed: u64,
    pub batch_size: usize,
}

/// One report line. Aggregates carry `count` and, when relevant, a note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub id: String,
    pub metric: String,
    /// `None` when the metric is undefined for the item (degenerate masks).
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// The evaluation inputs for one dataset item.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub sketch: ImageTensor,
    pub ground_truth: ImageTensor,
    pub sketch_mask: ImageTensor,
    pub reference: ImageTensor,
    pub reference_mask: ImageTensor,
}

fn item_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Builds every item's reference according to `policy`.
pub fn build_items(data: &[ImageTriple], policy: ReferencePolicy, seed: u64) -> Result<Vec<EvalItem>> {
    let partner: Vec<usize> = match policy {
        ReferencePolicy::Tps { .. } => (0..data.len()).collect(),
        ReferencePolicy::Shuffled => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut p = vec![0; data.len()];
            for (k, &i) in order.iter().enumerate() {
                p[i] = order[(k + 1) % order.len()];
            }
            p
        }
    };
    data.iter()
        .enumerate()
        .map(|(i, t)| {
            let src = &data[partner[i]];
            let (reference, reference_mask) = match policy {
                ReferencePolicy::Tps { grid, magnitude } => {
                    let p = TpsParams::random(grid, t.color.height(), t.color.width(), magnitude, item_seed(seed, i));
                    (tps_warp(&src.color, &p)?, tps_warp(&src.mask, &p)?)
                }
                ReferencePolicy::Shuffled => (src.color.clone(), src.mask.clone()),
            };
            Ok(EvalItem {
                id: t.id.clone(),
                sketch: t.sketch.clone(),
                ground_truth: t.color.clone(),
                sketch_mask: t.mask.clone(),
                reference,
                reference_mask,
            })
        })
        .collect()
}

/// Colorizes every item in batches. Item `i` samples with seed `seed + i`
/// (mixed), so results do not depend on its position in the dataset order.
pub fn colorize_items(items: &[EvalItem], model: &Model, opts: &EvalOptions) -> Result<Vec<ImageTensor>> {
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut out = Vec::with_capacity(items.len());
    for (c, chunk) in items.chunks(opts.batch_size).enumerate() {
        let reqs: Vec<InferenceRequest> = chunk
            .iter()
            .enumerate()
            .map(|(k, it)| {
                let mut r = InferenceRequest::new(it.sketch.clone(), it.reference.clone(), opts.mode);
                if opts.mode.uses_background() {
                    r = r.with_masks(it.sketch_mask.clone(), it.reference_mask.clone());
                }
                InferenceRequest {
                    thresholds: opts.thresholds,
                    guidance: opts.guidance,
                    steps: opts.steps,
                    seed: item_seed(opts.seed, c * opts.batch_size + k),
                    sampler: opts.sampler,
                    ..r
                }
            })
            .collect();
        out.extend(colorize_batch(&reqs, model)?);
    }
    Ok(out)
}

/// Scores results against ground truth (entanglement against the reference).
/// Emits per-item lines in item order, then one aggregate per metric.
pub fn score(items: &[EvalItem], results: &[ImageTensor], metrics: &[Metric], model: &Model) -> Result<Vec<ReportLine>> {
    if items.len() != results.len() {
        return Err(Error::invalid(format!("{} items but {} results", items.len(), results.len())));
    }
    let mut lines = Vec::with_capacity(items.len() * metrics.len() + metrics.len());
    let mut sums = vec![(0.0, 0usize); metrics.len()];
    for (it, res) in items.iter().zip(results) {
        for (mi, &m) in metrics.iter().enumerate() {
            let value = match m {
                Metric::Psnr => Some(psnr(res, &it.ground_truth)?),
                Metric::MsSsim => Some(ms_ssim(res, &it.ground_truth)?),
                Metric::EmbedCosine => Some(embed_cosine(&model.embedder, res, &it.ground_truth)?),
                Metric::Entanglement => {
                    match entanglement_score(res, &it.reference, &it.sketch_mask, &it.reference_mask) {
                        Ok(v) => Some(v),
                        Err(Error::InvalidArgument(msg)) => {
                            log::warn!("{}: entanglement undefined: {msg}", it.id);
                            None
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            if let Some(v) = value {
                sums[mi].0 += v;
                sums[mi].1 += 1;
            }
            lines.push(ReportLine { id: it.id.clone(), metric: m.name().into(), value, count: None, note: None });
        }
    }
    for (&m, (sum, n)) in metrics.iter().zip(sums) {
        let note = match m {
            Metric::Psnr => Some(format!("capped at {PSNR_CAP_DB} dB")),
            Metric::MsSsim => Some("scale count reduced so the coarsest scale is at least 8 px".into()),
            Metric::EmbedCosine => Some("internal embedder CLS cosine".into()),
            Metric::Entanglement => None,
        };
        lines.push(ReportLine {
            id: AGGREGATE_ID.into(),
            metric: m.name().into(),
            value: (n > 0).then(|| sum / n as f64),
            count: Some(n),
            note,
        });
    }
    Ok(lines)
}

pub fn evaluate(data: &[ImageTriple], model: &Model, opts: &EvalOptions) -> Result<Vec<ReportLine>> {
    let items = build_items(data, opts.references, opts.seed)?;
    let results = colorize_items(&items, model, opts)?;
    score(&items, &results, &opts.metrics, model)
}

pub fn report_to_jsonl(lines: &[ReportLine]) -> Result<String> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checkpoint;
    use crate::datagen::{gen_synthetic_triple, SceneSpec};
    use crate::model::ModelConfig;
    use crate::params::GroupSet;

    fn data(n: u64) -> Vec<ImageTriple> {
        (0..n).map(|i| gen_synthetic_triple(&SceneSpec::random(i, 32), format!("t{i}")).unwrap()).collect()
    }

    #[test]
    fn shuffled_pairs_are_a_derangement() {
        let d = data(5);
        let items = build_items(&d, ReferencePolicy::Shuffled, 3).unwrap();
        for (it, t) in items.iter().zip(&d) {
            assert_ne!(it.reference, t.color);
        }
        let mut used: Vec<_> = items.iter().map(|it| d.iter().position(|t| t.color == it.reference).unwrap()).collect();
        used.sort();
        assert_eq!(used, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_displacement_tps_gives_ground_truth_reference() {
        let d = data(2);
        let items = build_items(&d, ReferencePolicy::Tps { grid: 4, magnitude: 0.0 }, 9).unwrap();
        for (it, t) in items.iter().zip(&d) {
            assert_eq!(it.reference, t.color);
            assert_eq!(it.reference_mask, t.mask);
        }
        let warped = build_items(&d, ReferencePolicy::Tps { grid: 4, magnitude: 3.0 }, 9).unwrap();
        assert_ne!(warped[0].reference, d[0].color);
    }

    #[test]
    fn identical_pairs_score_the_cap_and_line_count() {
        let d = data(3);
        let m = Checkpoint::init(&ModelConfig::tiny(), 0).unwrap().model(GroupSet::EMPTY).unwrap();
        let items = build_items(&d, ReferencePolicy::Shuffled, 0).unwrap();
        let truths: Vec<ImageTensor> = items.iter().map(|it| it.ground_truth.clone()).collect();
        let metrics = vec![Metric::Psnr, Metric::EmbedCosine];
        let lines = score(&items, &truths, &metrics, &m).unwrap();
        assert_eq!(lines.len(), 3 * 2 + 2);
        for l in lines.iter().filter(|l| l.metric == "psnr") {
            assert_eq!(l.value, Some(PSNR_CAP_DB));
        }
        assert_eq!(lines.last().unwrap().value, Some(1.0));
        let text = report_to_jsonl(&lines).unwrap();
        assert_eq!(text.lines().count(), 8);
    }

    #[test]
    fn metric_lists() {
        assert_eq!(Metric::parse_list("psnr, ms_ssim").unwrap(), vec![Metric::Psnr, Metric::MsSsim]);
        assert!(Metric::parse_list("psnr,psnr").is_err());
        assert!(Metric::parse_list("fid").is_err());
        assert!(Metric::parse_list("").is_err());
    }
}
