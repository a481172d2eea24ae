//! Active-learning orchestration for object detection on tiled panoramic
//! imagery.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: boxes, IoU, greedy NMS and prediction-to-truth matching.
//! - [`tiling`]: slicing panoramas into tiles and mapping coordinates.
//! - [`corpus`]: the synthetic world, the labeled/unlabeled/test pool and
//!   its line-delimited manifest.
//! - [`detector`]: the seeded simulated detector and the bridge protocol for
//!   external detectors.
//! - [`selection`]: confidence buckets and batch selection.
//! - [`oracle`]: review and boxing label sources plus the leased job store.
//! - [`evaluation`]: confusion counts and recall/precision/F-score/IoU.
//! - [`engine`]: the loop that ties everything together and writes run
//!   directories.

pub mod corpus;
pub mod detector;
pub mod engine;
pub mod evaluation;
pub mod geometry;
pub mod oracle;
pub mod rng;
pub mod selection;
pub mod tiling;

pub use geometry::{BoundingBox, Detection, ImageId, MatchResult, NmsConfig};
