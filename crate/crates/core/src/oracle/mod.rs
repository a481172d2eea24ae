//! Label sources for the two crowd jobs: review (does the tile contain a
//! sign?) and boxing (draw tight boxes around each sign).
//!
//! The synthetic oracle answers from ground truth with optional noise. The
//! human oracle posts jobs to a [`JobStore`] and blocks until annotators have
//! worked through them.

mod jobs;

use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ImageRecord, LabelState};
use crate::geometry::{BoundingBox, ImageId};
use crate::rng;

pub use jobs::{
    Clock, Job, JobCounts, JobError, JobKind, JobResult, JobState, JobStore, ManualClock, Progress, SubmitAck,
    SystemClock,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("image {0} is already labeled")]
    AlreadyLabeled(ImageId),
    #[error("image {0} was not reviewed as containing a sign")]
    NotReviewedPositive(ImageId),
    #[error("invalid oracle config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Jobs(#[from] JobError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Synthetic,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Probability that a synthetic review answer is flipped.
    pub review_error_rate: f64,
    /// Each synthetic box edge moves by up to this fraction of the box size.
    pub box_jitter: f64,
    pub lease_timeout_secs: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mode: OracleMode::Synthetic,
            review_error_rate: 0.0,
            box_jitter: 0.0,
            lease_timeout_secs: 300,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if !(0.0..0.5).contains(&self.review_error_rate) {
            return Err(OracleError::InvalidConfig("review_error_rate must be in [0, 0.5)"));
        }
        if !(self.box_jitter >= 0.0 && self.box_jitter.is_finite()) {
            return Err(OracleError::InvalidConfig("box_jitter must be >= 0"));
        }
        if self.lease_timeout_secs == 0 {
            return Err(OracleError::InvalidConfig("lease_timeout_secs must be positive"));
        }
        Ok(())
    }
}

/// Synthetic review: true when the tile holds a sign, flipped with
/// probability `review_error_rate`.
pub fn review(image: &ImageRecord, cfg: &OracleConfig, seed: u64) -> Result<bool, OracleError> {
    if image.label_state != LabelState::Unlabeled {
        return Err(OracleError::AlreadyLabeled(image.image_id));
    }
    let truth = image.is_positive();
    let mut rng = rng::keyed(seed, "review", &[image.image_id.0 as u64]);
    let flip = rng.random::<f64>() < cfg.review_error_rate;
    Ok(truth != flip)
}

/// Synthetic boxing: the ground-truth boxes, each edge moved uniformly by up
/// to `box_jitter` of the box's width (x edges) or height (y edges).
pub fn boxes_for(image: &ImageRecord, cfg: &OracleConfig, seed: u64) -> Result<Vec<BoundingBox>, OracleError> {
    if image.label_state != (LabelState::Reviewed { contains: true }) {
        return Err(OracleError::NotReviewedPositive(image.image_id));
    }
    let tile = image.tile.tile_size as f64;
    let j = cfg.box_jitter;
    Ok(image
        .gt
        .iter()
        .enumerate()
        .map(|(k, g)| {
            if j == 0.0 {
                return g.bbox;
            }
            let mut rng = rng::keyed(seed, "box", &[image.image_id.0 as u64, k as u64]);
            let b = g.bbox;
            let (w, h) = (b.width(), b.height());
            let mut d = || rng.random_range(-j..=j);
            let x0 = (b.x_min() + d() * w).clamp(0.0, tile);
            let y0 = (b.y_min() + d() * h).clamp(0.0, tile);
            let x1 = (b.x_max() + d() * w).clamp(0.0, tile);
            let y1 = (b.y_max() + d() * h).clamp(0.0, tile);
            BoundingBox::new(x0, y0, x1, y1).unwrap_or(b)
        })
        .collect())
}

/// Batch labeling interface used by the engine.
pub trait Annotator {
    /// Called when an iteration's label phase starts.
    fn begin_iteration(&self, _iteration: u32) {}

    fn review(&self, images: &[&ImageRecord], iteration: u32) -> Result<Vec<bool>, OracleError>;
    fn boxes(&self, images: &[&ImageRecord], iteration: u32) -> Result<Vec<Vec<BoundingBox>>, OracleError>;
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticAnnotator {
    pub cfg: OracleConfig,
    pub seed: u64,
}

impl Annotator for SyntheticAnnotator {
    fn review(&self, images: &[&ImageRecord], _iteration: u32) -> Result<Vec<bool>, OracleError> {
        images.iter().map(|r| review(r, &self.cfg, self.seed)).collect()
    }

    fn boxes(&self, images: &[&ImageRecord], _iteration: u32) -> Result<Vec<Vec<BoundingBox>>, OracleError> {
        images.iter().map(|r| boxes_for(r, &self.cfg, self.seed)).collect()
    }
}

/// Routes labeling through the job store and waits for annotators.
#[derive(Clone)]
pub struct HumanAnnotator {
    pub store: Arc<JobStore>,
    pub poll: Duration,
}

impl HumanAnnotator {
    pub fn new(store: Arc<JobStore>) -> Self {
        Self {
            store,
            poll: Duration::from_millis(200),
        }
    }
}

impl Annotator for HumanAnnotator {
    fn begin_iteration(&self, iteration: u32) {
        self.store.set_iteration(iteration);
    }

    fn review(&self, images: &[&ImageRecord], iteration: u32) -> Result<Vec<bool>, OracleError> {
        if let Some(r) = images.iter().find(|r| r.label_state != LabelState::Unlabeled) {
            return Err(OracleError::AlreadyLabeled(r.image_id));
        }
        let ids: Vec<ImageId> = images.iter().map(|r| r.image_id).collect();
        let jobs = self.store.enqueue(JobKind::Review, &ids, iteration)?;
        let results = self.store.wait_all(&jobs, self.poll);
        Ok(results
            .into_iter()
            .map(|r| matches!(r, JobResult::Review { contains: true }))
            .collect())
    }

    fn boxes(&self, images: &[&ImageRecord], iteration: u32) -> Result<Vec<Vec<BoundingBox>>, OracleError> {
        if let Some(r) = images
            .iter()
            .find(|r| r.label_state != (LabelState::Reviewed { contains: true }))
        {
            return Err(OracleError::NotReviewedPositive(r.image_id));
        }
        let ids: Vec<ImageId> = images.iter().map(|r| r.image_id).collect();
        let jobs = self.store.enqueue(JobKind::Box, &ids, iteration)?;
        let results = self.store.wait_all(&jobs, self.poll);
        Ok(results
            .into_iter()
            .map(|r| match r {
                JobResult::Boxes { boxes } => boxes,
                JobResult::Review { .. } => Vec::new(),
            })
            .collect())
    }
}
