use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pool::PoolState;
use crate::geometry::{iou, BoundingBox, ImageId};
use crate::rng;
use crate::tiling::{make_grid, PanoramaSpec, TileRef, TilingError, DEFAULT_TILE_SIZE};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world needs at least one panorama")]
    NoPanoramas,
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tiling(#[from] TilingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occlusion {
    None,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blur {
    No,
    Yes,
}

pub const STRATUM_COUNT: usize = 12;

/// Appearance category of a sign; the simulated detector learns each one
/// separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub scale: Scale,
    pub occlusion: Occlusion,
    pub blur: Blur,
}

impl Stratum {
    /// Dense index in `0..STRATUM_COUNT`.
    pub fn index(&self) -> usize {
        let s = match self.scale {
            Scale::Small => 0,
            Scale::Medium => 1,
            Scale::Large => 2,
        };
        let o = match self.occlusion {
            Occlusion::None => 0,
            Occlusion::Partial => 1,
        };
        let b = match self.blur {
            Blur::No => 0,
            Blur::Yes => 1,
        };
        s * 4 + o * 2 + b
    }

    pub fn from_index(i: usize) -> Stratum {
        assert!(i < STRATUM_COUNT);
        Stratum {
            scale: [Scale::Small, Scale::Medium, Scale::Large][i / 4],
            occlusion: if (i / 2).is_multiple_of(2) {
                Occlusion::None
            } else {
                Occlusion::Partial
            },
            blur: if i.is_multiple_of(2) { Blur::No } else { Blur::Yes },
        }
    }
}

/// `small +0.35`, `partial occlusion +0.30`, `blur +0.20`, plus `noise`,
/// clamped to `[0, 1]`.
pub fn difficulty_from(stratum: &Stratum, noise: f64) -> f64 {
    let mut d = noise;
    if stratum.scale == Scale::Small {
        d += 0.35;
    }
    if stratum.occlusion == Occlusion::Partial {
        d += 0.30;
    }
    if stratum.blur == Blur::Yes {
        d += 0.20;
    }
    d.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub stratum: Stratum,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("image {0} is already labeled")]
    AlreadyLabeled(ImageId),
    #[error("image {0} must be reviewed as containing a sign before boxing")]
    NotReviewedPositive(ImageId),
}

/// Label progress of one image: review first, then boxing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum LabelState {
    Unlabeled,
    Reviewed { contains: bool },
    Boxed { boxes: Vec<BoundingBox> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub tile: TileRef,
    pub gt: Vec<GroundTruthObject>,
    pub distractors: u32,
    pub label_state: LabelState,
}

impl ImageRecord {
    pub fn is_positive(&self) -> bool {
        !self.gt.is_empty()
    }

    pub fn mark_reviewed(&mut self, contains: bool) -> Result<(), LabelError> {
        if self.label_state != LabelState::Unlabeled {
            return Err(LabelError::AlreadyLabeled(self.image_id));
        }
        self.label_state = LabelState::Reviewed { contains };
        Ok(())
    }

    pub fn mark_boxed(&mut self, boxes: Vec<BoundingBox>) -> Result<(), LabelError> {
        if self.label_state != (LabelState::Reviewed { contains: true }) {
            return Err(LabelError::NotReviewedPositive(self.image_id));
        }
        self.label_state = LabelState::Boxed { boxes };
        Ok(())
    }

    /// Labeled boxes, empty unless the image is boxed.
    pub fn labeled_boxes(&self) -> &[BoundingBox] {
        match &self.label_state {
            LabelState::Boxed { boxes } => boxes,
            _ => &[],
        }
    }
}

/// Marginal category probabilities for sign strata. Each factor sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMix {
    /// small, medium, large
    pub scale: [f64; 3],
    /// none, partial
    pub occlusion: [f64; 2],
    /// no, yes
    pub blur: [f64; 2],
}

impl Default for StratumMix {
    fn default() -> Self {
        Self {
            scale: [0.40, 0.40, 0.20],
            occlusion: [0.70, 0.30],
            blur: [0.80, 0.20],
        }
    }
}

fn categorical<const N: usize>(rng: &mut impl Rng, probs: &[f64; N]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    N - 1
}

impl StratumMix {
    fn draw(&self, rng: &mut impl Rng) -> Stratum {
        let scale = [Scale::Small, Scale::Medium, Scale::Large][categorical(rng, &self.scale)];
        let occlusion = [Occlusion::None, Occlusion::Partial][categorical(rng, &self.occlusion)];
        let blur = [Blur::No, Blur::Yes][categorical(rng, &self.blur)];
        Stratum { scale, occlusion, blur }
    }

    fn validate(&self) -> Result<(), WorldError> {
        fn check(name: &str, p: &[f64]) -> Result<(), WorldError> {
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(WorldError::InvalidConfig(format!(
                    "stratum_mix.{name} must be probabilities summing to 1"
                )));
            }
            Ok(())
        }
        check("scale", &self.scale)?;
        check("occlusion", &self.occlusion)?;
        check("blur", &self.blur)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_panoramas: u32,
    pub panorama_width: u32,
    pub panorama_height: u32,
    pub tile_size: u32,
    pub stride: u32,
    /// Fraction of tiles holding at least one sign.
    pub sign_prevalence: f64,
    /// Positive tiles hold `1 + Poisson(extra_signs_mean)` signs, capped.
    pub extra_signs_mean: f64,
    pub max_signs_per_tile: u32,
    /// Mean of the Poisson count of sign-like distractors per tile.
    pub distractor_rate: f64,
    /// Extra distractor mean per sign on the tile: poles, plates and other
    /// street furniture cluster around signs.
    pub distractors_per_sign: f64,
    pub stratum_mix: StratumMix,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_panoramas: 200,
            panorama_width: crate::tiling::DEFAULT_PANORAMA_WIDTH,
            panorama_height: crate::tiling::DEFAULT_PANORAMA_HEIGHT,
            tile_size: DEFAULT_TILE_SIZE,
            stride: DEFAULT_TILE_SIZE,
            sign_prevalence: 0.02,
            extra_signs_mean: 0.6,
            max_signs_per_tile: 6,
            distractor_rate: 0.5,
            distractors_per_sign: 1.5,
            stratum_mix: StratumMix::default(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.n_panoramas == 0 {
            return Err(WorldError::NoPanoramas);
        }
        if !(self.sign_prevalence > 0.0 && self.sign_prevalence <= 1.0) {
            return Err(WorldError::InvalidConfig("sign_prevalence must be in (0, 1]".into()));
        }
        if !(self.extra_signs_mean >= 0.0 && self.extra_signs_mean.is_finite()) {
            return Err(WorldError::InvalidConfig("extra_signs_mean must be >= 0".into()));
        }
        if self.max_signs_per_tile == 0 {
            return Err(WorldError::InvalidConfig("max_signs_per_tile must be >= 1".into()));
        }
        if !(self.distractor_rate >= 0.0 && self.distractor_rate.is_finite()) {
            return Err(WorldError::InvalidConfig("distractor_rate must be >= 0".into()));
        }
        if !(self.distractors_per_sign >= 0.0 && self.distractors_per_sign.is_finite()) {
            return Err(WorldError::InvalidConfig("distractors_per_sign must be >= 0".into()));
        }
        self.stratum_mix.validate()?;
        self.grid_for(0).map(|_| ())
    }

    fn grid_for(&self, panorama_id: u32) -> Result<crate::tiling::TileGrid, WorldError> {
        let pano = PanoramaSpec {
            panorama_id,
            width: self.panorama_width,
            height: self.panorama_height,
        };
        Ok(make_grid(&pano, self.tile_size, self.stride)?)
    }
}

/// A generated or loaded corpus: the images and their pool partition.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub images: Vec<ImageRecord>,
    pub pool: PoolState,
}

impl World {
    /// Image records are stored densely, so the id is the index.
    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images.get(id.0 as usize).filter(|r| r.image_id == id)
    }

    pub fn image_mut(&mut self, id: ImageId) -> Option<&mut ImageRecord> {
        self.images.get_mut(id.0 as usize).filter(|r| r.image_id == id)
    }

    pub fn total_gt(&self) -> usize {
        self.images.iter().map(|r| r.gt.len()).sum()
    }
}

fn sign_extent(scale: Scale, tile: f64, rng: &mut impl Rng) -> (f64, f64) {
    let k = tile / DEFAULT_TILE_SIZE as f64;
    let (lo, hi) = match scale {
        Scale::Small => (14.0, 40.0),
        Scale::Medium => (40.0, 90.0),
        Scale::Large => (90.0, 180.0),
    };
    let w = rng.random_range(lo..hi) * k;
    let h = (w * rng.random_range(1.0..1.5)).min(tile - 1.0);
    (w.round().max(2.0), h.round().max(2.0))
}

fn place(w: f64, h: f64, tile: f64, rng: &mut impl Rng) -> BoundingBox {
    let x = rng.random_range(0.0..=(tile - w)).floor();
    let y = rng.random_range(0.0..=(tile - h)).floor();
    BoundingBox::new(x, y, x + w, y + h).expect("positive extent inside tile")
}

fn generate_tile(cfg: &WorldConfig, image_id: ImageId, tile: TileRef) -> ImageRecord {
    let mut rng = rng::keyed(cfg.seed, "tile", &[image_id.0 as u64]);
    let size = cfg.tile_size as f64;
    let mut gt: Vec<GroundTruthObject> = Vec::new();
    if rng.random_bool(cfg.sign_prevalence) {
        let extra = if cfg.extra_signs_mean > 0.0 {
            Poisson::new(cfg.extra_signs_mean)
                .expect("positive mean")
                .sample(&mut rng) as u32
        } else {
            0
        };
        let n = (1 + extra).min(cfg.max_signs_per_tile);
        for _ in 0..n {
            let stratum = cfg.stratum_mix.draw(&mut rng);
            let (w, h) = sign_extent(stratum.scale, size, &mut rng);
            let mut bbox = place(w, h, size, &mut rng);
            for _ in 0..20 {
                if gt.iter().all(|g| iou(&g.bbox, &bbox) == 0.0) {
                    break;
                }
                bbox = place(w, h, size, &mut rng);
            }
            let noise = rng.random_range(0.0..=0.15);
            gt.push(GroundTruthObject {
                bbox,
                stratum,
                difficulty: difficulty_from(&stratum, noise),
            });
        }
    }
    let rate = cfg.distractor_rate + cfg.distractors_per_sign * gt.len() as f64;
    let distractors = if rate > 0.0 {
        Poisson::new(rate).expect("positive rate").sample(&mut rng) as u32
    } else {
        0
    };
    ImageRecord {
        image_id,
        tile,
        gt,
        distractors,
        label_state: LabelState::Unlabeled,
    }
}

/// Generate the synthetic world. Every draw is keyed by `(seed, image id)`,
/// so the result is a pure function of the config.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, WorldError> {
    cfg.validate()?;
    let mut images = Vec::new();
    for p in 0..cfg.n_panoramas {
        let grid = cfg.grid_for(p)?;
        for tile in grid.tiles {
            let id = ImageId(images.len() as u32);
            images.push(generate_tile(cfg, id, tile));
        }
    }
    let pool = PoolState::new(images.iter().map(|r| r.image_id));
    Ok(World {
        config: cfg.clone(),
        images,
        pool,
    })
}

/// Positions of an image's distractor objects, a pure function of the world
/// seed and the image.
pub fn distractor_layout(world_seed: u64, record: &ImageRecord) -> Vec<BoundingBox> {
    let size = record.tile.tile_size as f64;
    (0..record.distractors)
        .map(|k| {
            let mut rng = rng::keyed(world_seed, "distractor", &[record.image_id.0 as u64, k as u64]);
            let scale = [Scale::Small, Scale::Medium, Scale::Large][rng.random_range(0..3)];
            let (w, h) = sign_extent(scale, size, &mut rng);
            place(w, h, size, &mut rng)
        })
        .collect()
}
