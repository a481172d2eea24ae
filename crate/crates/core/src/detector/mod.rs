//! Detectors: the seeded simulated learner and the bridge to external
//! processes speaking the `alforge-bridge/1` protocol.

pub mod bridge;
mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::World;
use crate::geometry::{Detection, ImageId};

pub use sim::{detection_probability, fit, predict, PredictContext, SimParams, SimulatedDetector, SkillState};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image {0} has not been boxed and cannot be used for training")]
    Unboxed(ImageId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error(transparent)]
    Bridge(#[from] bridge::BridgeError),
}

/// What a fit call reports back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub images: usize,
    pub annotations: usize,
    /// Training loss or a proxy for it, when the detector has one.
    pub loss: Option<f64>,
}

/// A trainable detector. `fit` always sees the full cumulative training set
/// of `world`; `predict` returns raw detections, before NMS.
pub trait Detector {
    fn name(&self) -> &str;

    fn fit(&mut self, world: &World, iteration: u32) -> Result<FitSummary, DetectorError>;

    fn predict(
        &mut self,
        world: &World,
        ids: &[ImageId],
        iteration: u32,
    ) -> Result<BTreeMap<ImageId, Vec<Detection>>, DetectorError>;
}
