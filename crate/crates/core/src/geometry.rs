//! Axis-aligned box arithmetic, greedy non-maximum suppression and
//! confidence-greedy matching of predictions to ground truth.
//!
//! Coordinates are real-valued pixels with the origin at the top-left of the
//! frame. Areas are continuous, `(x_max - x_min) * (y_max - y_min)`, which is
//! exact for integer boxes.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("invalid NMS config: {0}")]
    InvalidNmsConfig(&'static str),
    #[error("match IoU {0} outside (0, 1)")]
    InvalidMatchIou(f64),
}

/// Identifier of one tile image. The numeric value doubles as the image-order
/// index used for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

/// Axis-aligned rectangle with `x_min < x_max`, `y_min < y_max`, finite and
/// non-negative coordinates. Construction validates; deserialization goes
/// through the same check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let invalid = |reason| GeometryError::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x_min < 0.0 || y_min < 0.0 {
            return Err(invalid("negative coordinate"));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(invalid("zero or negative extent"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`, 0 when disjoint or only touching.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// True when the box lies within `[0, width] x [0, height]`.
    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Translate by a non-negative or negative offset, revalidating.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<BoundingBox, GeometryError> {
        BoundingBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One scored box on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(image_id: ImageId, bbox: BoundingBox, confidence: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GeometryError::InvalidConfidence(confidence));
        }
        Ok(Self {
            image_id,
            bbox,
            confidence,
        })
    }
}

/// The three-threshold detection output chain: a low pre-filter, greedy NMS
/// at an IoU threshold, then a final confidence cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub pre_filter_conf: f64,
    pub nms_iou: f64,
    pub final_conf: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            pre_filter_conf: 0.01,
            nms_iou: 0.45,
            final_conf: 0.30,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(0.0 <= self.pre_filter_conf && self.pre_filter_conf <= self.final_conf && self.final_conf <= 1.0) {
            return Err(GeometryError::InvalidNmsConfig(
                "require 0 <= pre_filter_conf <= final_conf <= 1",
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(GeometryError::InvalidNmsConfig("require 0 < nms_iou < 1"));
        }
        Ok(())
    }
}

/// Indices of `dets` sorted by descending confidence; equal confidences keep
/// input order.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Greedy non-maximum suppression over the detections of a single image.
///
/// Detections below `pre_filter_conf` are dropped first. The highest-confidence
/// survivor is then kept repeatedly and every remaining detection with
/// `iou >= nms_iou` against it is discarded. Kept detections below
/// `final_conf` are dropped last. The result is sorted by descending
/// confidence, ties in input order.
pub fn greedy_nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    debug_assert!(
        dets.windows(2).all(|w| w[0].image_id == w[1].image_id),
        "greedy_nms expects detections from one image"
    );
    let candidates: Vec<Detection> = dets
        .iter()
        .filter(|d| d.confidence >= cfg.pre_filter_conf)
        .copied()
        .collect();
    let order = confidence_order(&candidates);
    let mut suppressed = vec![false; candidates.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(candidates[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&candidates[i].bbox, &candidates[j].bbox) >= cfg.nms_iou {
                suppressed[j] = true;
            }
        }
    }
    kept.retain(|d| d.confidence >= cfg.final_conf);
    kept
}

/// A matched prediction/ground-truth pair, by index into the matcher inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Outcome of one-to-one matching on one image. Entries index into the
/// `preds` and `gts` slices handed to [`match_detections`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp_pairs: Vec<TpPair>,
    pub fp: Vec<usize>,
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.tp_pairs.len()
    }
}

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

pub fn validate_match_iou(match_iou: f64) -> Result<(), GeometryError> {
    if match_iou > 0.0 && match_iou < 1.0 {
        Ok(())
    } else {
        Err(GeometryError::InvalidMatchIou(match_iou))
    }
}

/// Confidence-greedy one-to-one matching.
///
/// Predictions are visited by descending confidence (ties by input order).
/// Each takes the still-unmatched ground truth with the highest IoU (ties by
/// lower index) when that IoU is at least `match_iou`, otherwise it is a false
/// positive. Ground truths left unmatched are false negatives.
pub fn match_detections(preds: &[Detection], gts: &[BoundingBox], match_iou: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for p in confidence_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&preds[p].bbox, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= match_iou => {
                taken[g] = true;
                result.tp_pairs.push(TpPair { pred: p, gt: g, iou: v });
            }
            _ => result.fp.push(p),
        }
    }
    result.fn_ = (0..gts.len()).filter(|&g| !taken[g]).collect();
    result
}
