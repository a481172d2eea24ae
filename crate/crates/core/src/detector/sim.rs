//! Simulated detector whose competence per sign stratum grows with the number
//! of labeled annotations of that stratum:
//!
//! `skill_k = 1 - (1 - s0) * exp(-n_k / tau)`
//!
//! A sign is found with probability `skill_k * (1 - 0.5 * difficulty)`, its
//! box is jittered by `jitter_base * (1 - skill_k)` of its size per edge, and
//! distractors turn into false positives at a rate `fp_base * exp(-m / fp_tau)`
//! that decays with the total annotation count `m`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Detector, DetectorError, FitSummary};
use crate::corpus::{distractor_layout, GroundTruthObject, ImageRecord, LabelState, World, STRATUM_COUNT};
use crate::geometry::{match_detections, BoundingBox, Detection, ImageId};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub base_skill: f64,
    pub tau: f64,
    pub fp_base: f64,
    pub fp_tau: f64,
    pub jitter_base: f64,
    pub confidence_noise: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            base_skill: 0.35,
            tau: 40.0,
            fp_base: 0.12,
            fp_tau: 150.0,
            jitter_base: 0.35,
            confidence_noise: 0.08,
        }
    }
}

/// Per-stratum annotation counts and the parameters that turn them into
/// skills. Immutable once fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillState {
    pub params: SimParams,
    pub counts: [u64; STRATUM_COUNT],
    /// Total labeled annotations `m`, including boxes not attributable to a
    /// stratum.
    pub total_annotations: u64,
}

impl SkillState {
    pub fn new(params: SimParams) -> Self {
        Self {
            params,
            counts: [0; STRATUM_COUNT],
            total_annotations: 0,
        }
    }

    pub fn skill_at(&self, n: u64) -> f64 {
        1.0 - (1.0 - self.params.base_skill) * (-(n as f64) / self.params.tau).exp()
    }

    pub fn skill(&self, stratum_index: usize) -> f64 {
        self.skill_at(self.counts[stratum_index])
    }

    pub fn skills(&self) -> [f64; STRATUM_COUNT] {
        std::array::from_fn(|k| self.skill(k))
    }

    /// Per-distractor false-positive emission probability.
    pub fn fp_rate(&self) -> f64 {
        self.params.fp_base * (-(self.total_annotations as f64) / self.params.fp_tau).exp()
    }

    /// Mean shortfall from perfect skill across strata; stands in for a
    /// training loss.
    pub fn loss_proxy(&self) -> f64 {
        self.skills().iter().map(|s| 1.0 - s).sum::<f64>() / STRATUM_COUNT as f64
    }
}

/// Add the annotations of boxed images to the counts. Each labeled box is
/// attributed to the stratum of the ground-truth sign it overlaps (IoU >= 0.5,
/// greedy one-to-one); boxes without such a sign still count toward `m`.
pub fn fit(state: &SkillState, new_labels: &[&ImageRecord]) -> Result<SkillState, DetectorError> {
    let mut next = state.clone();
    for rec in new_labels {
        let LabelState::Boxed { boxes } = &rec.label_state else {
            return Err(DetectorError::Unboxed(rec.image_id));
        };
        next.total_annotations += boxes.len() as u64;
        let as_dets: Vec<Detection> = boxes
            .iter()
            .map(|b| Detection {
                image_id: rec.image_id,
                bbox: *b,
                confidence: 1.0,
            })
            .collect();
        let gts: Vec<BoundingBox> = rec.gt.iter().map(|g| g.bbox).collect();
        for pair in match_detections(&as_dets, &gts, 0.5).tp_pairs {
            next.counts[rec.gt[pair.gt].stratum.index()] += 1;
        }
    }
    Ok(next)
}

pub fn detection_probability(state: &SkillState, g: &GroundTruthObject) -> f64 {
    (state.skill(g.stratum.index()) * (1.0 - 0.5 * g.difficulty)).clamp(0.0, 1.0)
}

/// Everything besides the skill state that keys a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictContext {
    pub seed: u64,
    pub iteration: u32,
    pub world_seed: u64,
}

fn jittered(bbox: &BoundingBox, eta: f64, tile: f64, rng: &mut impl Rng) -> BoundingBox {
    let (w, h) = (bbox.width(), bbox.height());
    let mut d = [0.0f64; 4];
    for v in d.iter_mut() {
        *v = if eta > 0.0 { rng.random_range(-eta..=eta) } else { 0.0 };
    }
    let x0 = (bbox.x_min() + d[0] * w).clamp(0.0, tile - 1.0);
    let y0 = (bbox.y_min() + d[1] * h).clamp(0.0, tile - 1.0);
    let x1 = (bbox.x_max() + d[2] * w).clamp(x0 + 1.0, tile);
    let y1 = (bbox.y_max() + d[3] * h).clamp(y0 + 1.0, tile);
    BoundingBox::new(x0, y0, x1, y1).expect("clamped box is valid")
}

/// Raw detections for one image. Reads only ground-truth geometry, strata
/// and distractors; never the label state. Every sign and distractor consumes
/// the same draws whether or not it fires, so higher skill yields a superset
/// of detections under the same key.
pub fn predict(state: &SkillState, img: &ImageRecord, ctx: &PredictContext) -> Vec<Detection> {
    let p = &state.params;
    let mut rng = rng::keyed(ctx.seed, "predict", &[ctx.iteration as u64, img.image_id.0 as u64]);
    let noise = Normal::new(0.0, p.confidence_noise).expect("finite sigma");
    let fp_conf = Normal::new(0.45, 0.15).expect("finite sigma");
    let tile = img.tile.tile_size as f64;
    let mut out = Vec::new();

    for g in &img.gt {
        let prob = detection_probability(state, g);
        let u: f64 = rng.random();
        let eta = p.jitter_base * (1.0 - state.skill(g.stratum.index()));
        let bbox = jittered(&g.bbox, eta, tile, &mut rng);
        let confidence = (0.1 + 0.9 * prob + noise.sample(&mut rng)).clamp(0.0, 1.0);
        if u < prob {
            out.push(Detection {
                image_id: img.image_id,
                bbox,
                confidence,
            });
        }
    }

    let fp_rate = state.fp_rate();
    for d in distractor_layout(ctx.world_seed, img) {
        let u: f64 = rng.random();
        let bbox = jittered(&d, 0.05, tile, &mut rng);
        let confidence = Distribution::<f64>::sample(&fp_conf, &mut rng).clamp(0.0, 1.0);
        if u < fp_rate {
            out.push(Detection {
                image_id: img.image_id,
                bbox,
                confidence,
            });
        }
    }
    out
}

/// In-process detector backed by [`SkillState`]. Refits from scratch on the
/// full training set each iteration.
#[derive(Debug, Clone)]
pub struct SimulatedDetector {
    pub params: SimParams,
    pub seed: u64,
    pub state: SkillState,
}

impl SimulatedDetector {
    pub fn new(params: SimParams, seed: u64) -> Self {
        Self {
            params,
            seed,
            state: SkillState::new(params),
        }
    }
}

impl Detector for SimulatedDetector {
    fn name(&self) -> &str {
        "simulated"
    }

    fn fit(&mut self, world: &World, _iteration: u32) -> Result<FitSummary, DetectorError> {
        let train = world
            .pool
            .train
            .iter()
            .map(|&id| world.image(id).ok_or(DetectorError::UnknownImage(id)))
            .collect::<Result<Vec<_>, _>>()?;
        self.state = fit(&SkillState::new(self.params), &train)?;
        Ok(FitSummary {
            images: train.len(),
            annotations: self.state.total_annotations as usize,
            loss: Some(self.state.loss_proxy()),
        })
    }

    fn predict(
        &mut self,
        world: &World,
        ids: &[ImageId],
        iteration: u32,
    ) -> Result<BTreeMap<ImageId, Vec<Detection>>, DetectorError> {
        let ctx = PredictContext {
            seed: self.seed,
            iteration,
            world_seed: world.config.seed,
        };
        let state = &self.state;
        ids.par_iter()
            .map(|&id| {
                let rec = world.image(id).ok_or(DetectorError::UnknownImage(id))?;
                Ok((id, predict(state, rec, &ctx)))
            })
            .collect()
    }
}
