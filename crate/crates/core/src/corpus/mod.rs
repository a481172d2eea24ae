//! The tile corpus: a synthetic world of panoramas, tiles and signs, the
//! labeled/unlabeled/test pool, and the line-delimited manifest both are
//! persisted as.

mod manifest;
mod pool;
mod world;

pub use manifest::{load_world, persist_world, read_manifest, write_manifest, ManifestError, MANIFEST_FORMAT};
pub use pool::{initial_sample, split_train_test, PoolError, PoolMembership, PoolState};
pub use world::{
    difficulty_from, distractor_layout, generate_world, Blur, GroundTruthObject, ImageRecord, LabelError, LabelState,
    Occlusion, Scale, Stratum, StratumMix, World, WorldConfig, WorldError, STRATUM_COUNT,
};
