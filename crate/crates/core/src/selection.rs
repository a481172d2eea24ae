//! Confidence buckets over the unlabeled pool and the quota-based draw of
//! the next labeling batch.
//!
//! Images are scored by their most confident post-NMS detection and split
//! into a High bucket (`c > high_above`), a Low bucket
//! (`low_floor <= c <= high_above`) and a NoPrediction bucket (below
//! `low_floor`, or no detection at all). A batch takes the least confident
//! High images, the most confident Low images plus a random draw from the
//! rest of Low, and a random draw from NoPrediction.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Detection, ImageId};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("confidence {confidence} for image {image_id} outside [0, 1]")]
    BadScore { image_id: ImageId, confidence: f64 },
    #[error("invalid thresholds: require 0 < low_floor < high_above < 1")]
    BadThresholds,
    #[error("invalid selection plan: {0}")]
    BadPlan(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketThresholds {
    pub high_above: f64,
    pub low_floor: f64,
}

impl Default for BucketThresholds {
    fn default() -> Self {
        Self {
            high_above: 0.80,
            low_floor: 0.30,
        }
    }
}

impl BucketThresholds {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if 0.0 < self.low_floor && self.low_floor < self.high_above && self.high_above < 1.0 {
            Ok(())
        } else {
            Err(SelectionError::BadThresholds)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    High,
    Low,
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub high: Vec<(ImageId, f64)>,
    pub low: Vec<(ImageId, f64)>,
    pub none: Vec<(ImageId, Option<f64>)>,
}

impl Buckets {
    pub fn len(&self) -> usize {
        self.high.len() + self.low.len() + self.none.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every scored image with its bucket and confidence, ascending by id.
    pub fn entries(&self) -> Vec<(ImageId, Bucket, Option<f64>)> {
        let mut all: Vec<(ImageId, Bucket, Option<f64>)> = self
            .high
            .iter()
            .map(|&(id, c)| (id, Bucket::High, Some(c)))
            .chain(self.low.iter().map(|&(id, c)| (id, Bucket::Low, Some(c))))
            .chain(self.none.iter().map(|&(id, c)| (id, Bucket::None, c)))
            .collect();
        all.sort_by_key(|e| e.0);
        all
    }
}

/// Per-image confidence: the maximum over its post-NMS detections.
pub fn image_confidence(dets: &[Detection]) -> Option<f64> {
    dets.iter().map(|d| d.confidence).fold(None, |acc, c| match acc {
        Some(m) if m >= c => Some(m),
        _ => Some(c),
    })
}

pub fn partition_pool(
    scores: &BTreeMap<ImageId, Option<f64>>,
    t: &BucketThresholds,
) -> Result<Buckets, SelectionError> {
    t.validate()?;
    let mut b = Buckets::default();
    for (&image_id, &score) in scores {
        match score {
            Some(c) if !(0.0..=1.0).contains(&c) => {
                return Err(SelectionError::BadScore {
                    image_id,
                    confidence: c,
                })
            }
            Some(c) if c > t.high_above => b.high.push((image_id, c)),
            Some(c) if c >= t.low_floor => b.low.push((image_id, c)),
            other => b.none.push((image_id, other)),
        }
    }
    Ok(b)
}

/// How a labeling batch is spread over the buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub budget: usize,
    /// Shares of the budget for high, low and none; sum to 1.
    pub proportions: [f64; 3],
    /// Share of the Low quota taken top-down by confidence; the rest is random.
    pub low_top_share: f64,
}

impl Default for SelectionPlan {
    fn default() -> Self {
        Self {
            budget: 1000,
            proportions: [0.20, 0.60, 0.20],
            low_top_share: 0.5,
        }
    }
}

/// Concrete per-component counts derived from a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quotas {
    pub high_top_k: usize,
    pub low_top_k: usize,
    pub low_random_k: usize,
    pub none_random_k: usize,
}

impl Quotas {
    pub fn total(&self) -> usize {
        self.high_top_k + self.low_top_k + self.low_random_k + self.none_random_k
    }
}

/// Largest-remainder apportionment of `total` by `weights`. Equal remainders
/// go to the earlier slot. All-zero weights split evenly.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    if weights.is_empty() {
        return vec![];
    }
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut out: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (shares[a] - shares[a].floor(), shares[b] - shares[b].floor());
        rb.partial_cmp(&ra).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

impl SelectionPlan {
    pub fn with_budget(budget: usize) -> Self {
        Self {
            budget,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SelectionError::BadPlan("proportions must lie in [0, 1]"));
        }
        if (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SelectionError::BadPlan("proportions must sum to 1"));
        }
        if !(0.0..=1.0).contains(&self.low_top_share) {
            return Err(SelectionError::BadPlan("low_top_share must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn quotas(&self) -> Quotas {
        let per_bucket = apportion(self.budget, &self.proportions);
        let low = apportion(per_bucket[1], &[self.low_top_share, 1.0 - self.low_top_share]);
        Quotas {
            high_top_k: per_bucket[0],
            low_top_k: low[0],
            low_random_k: low[1],
            none_random_k: per_bucket[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionReason {
    HighTopk,
    LowTopk,
    LowRandom,
    NoneRandom,
    /// Uniform draw of the random-selection baseline.
    Random,
}

/// One line of the per-iteration selection record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedImage {
    pub image_id: ImageId,
    pub bucket: Bucket,
    pub confidence: Option<f64>,
    pub selection_reason: SelectionReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub picks: Vec<SelectedImage>,
    /// Budget left unfilled because the pool ran out.
    pub shortfall: usize,
}

impl Selection {
    pub fn ids(&self) -> Vec<ImageId> {
        self.picks.iter().map(|p| p.image_id).collect()
    }

    pub fn is_short(&self) -> bool {
        self.shortfall > 0
    }
}

/// Counts actually drawn from each component once shortfalls are moved.
fn effective_quotas(b: &Buckets, plan: &SelectionPlan) -> (Quotas, usize) {
    let q = plan.quotas();
    let mut take = Quotas {
        high_top_k: q.high_top_k.min(b.high.len()),
        low_top_k: q.low_top_k.min(b.low.len()),
        low_random_k: 0,
        none_random_k: q.none_random_k.min(b.none.len()),
    };
    take.low_random_k = q.low_random_k.min(b.low.len() - take.low_top_k);
    let mut shortfall = plan.budget - take.total();
    while shortfall > 0 {
        let spare = [
            b.high.len() - take.high_top_k,
            b.low.len() - take.low_top_k - take.low_random_k,
            b.none.len() - take.none_random_k,
        ];
        let receivers: Vec<usize> = (0..3).filter(|&i| spare[i] > 0).collect();
        if receivers.is_empty() {
            break;
        }
        let weights: Vec<f64> = receivers.iter().map(|&i| plan.proportions[i]).collect();
        let alloc = apportion(shortfall, &weights);
        for (&i, a) in receivers.iter().zip(alloc) {
            let got = a.min(spare[i]);
            match i {
                0 => take.high_top_k += got,
                1 => take.low_random_k += got,
                _ => take.none_random_k += got,
            }
            shortfall -= got;
        }
    }
    (take, shortfall)
}

/// `k` ids drawn uniformly without replacement; candidates are canonicalised
/// by id first so the draw depends only on the set and the seed.
fn sample_ids<T: Copy>(seed: u64, tag: &str, mut items: Vec<(ImageId, T)>, k: usize) -> Vec<(ImageId, T)> {
    items.sort_by_key(|e| e.0);
    let mut rng = rng::keyed(seed, tag, &[]);
    let mut idx = index::sample(&mut rng, items.len(), k.min(items.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// Draw the next batch. When a bucket cannot fill its quota its shortfall
/// moves to the other buckets in proportion to their plan weights, into the
/// random components of Low and NoPrediction and the ascending picks of
/// High. If the whole pool is smaller than the budget, everything is taken
/// and the remainder is reported as `shortfall`.
pub fn select_batch(b: &Buckets, plan: &SelectionPlan, seed: u64) -> Result<Selection, SelectionError> {
    plan.validate()?;
    let (take, shortfall) = effective_quotas(b, plan);
    let mut picks = Vec::with_capacity(take.total());

    let mut high = b.high.clone();
    high.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(Ordering::Equal).then(x.0.cmp(&y.0)));
    picks.extend(high.iter().take(take.high_top_k).map(|&(id, c)| SelectedImage {
        image_id: id,
        bucket: Bucket::High,
        confidence: Some(c),
        selection_reason: SelectionReason::HighTopk,
    }));

    let mut low = b.low.clone();
    low.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(Ordering::Equal).then(x.0.cmp(&y.0)));
    let rest = low.split_off(take.low_top_k);
    picks.extend(low.iter().map(|&(id, c)| SelectedImage {
        image_id: id,
        bucket: Bucket::Low,
        confidence: Some(c),
        selection_reason: SelectionReason::LowTopk,
    }));
    picks.extend(
        sample_ids(seed, "low_random", rest, take.low_random_k)
            .into_iter()
            .map(|(id, c)| SelectedImage {
                image_id: id,
                bucket: Bucket::Low,
                confidence: Some(c),
                selection_reason: SelectionReason::LowRandom,
            }),
    );
    picks.extend(
        sample_ids(seed, "none_random", b.none.clone(), take.none_random_k)
            .into_iter()
            .map(|(id, c)| SelectedImage {
                image_id: id,
                bucket: Bucket::None,
                confidence: c,
                selection_reason: SelectionReason::NoneRandom,
            }),
    );

    let mut seen = BTreeSet::new();
    picks.retain(|p| seen.insert(p.image_id));
    let shortfall = plan.budget.saturating_sub(picks.len()).max(shortfall);
    Ok(Selection { picks, shortfall })
}

/// Uniform batch over all scored images, ignoring buckets. Used by the
/// random-selection baseline.
pub fn random_batch(b: &Buckets, budget: usize, seed: u64) -> Selection {
    let entries: Vec<(ImageId, (Bucket, Option<f64>))> =
        b.entries().into_iter().map(|(id, bk, c)| (id, (bk, c))).collect();
    let available = entries.len();
    let picks = sample_ids(seed, "random_baseline", entries, budget)
        .into_iter()
        .map(|(id, (bucket, confidence))| SelectedImage {
            image_id: id,
            bucket,
            confidence,
            selection_reason: SelectionReason::Random,
        })
        .collect();
    Selection {
        picks,
        shortfall: budget.saturating_sub(available),
    }
}
