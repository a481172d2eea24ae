//! Slicing panoramas into fixed-size square tiles and mapping boxes between
//! tile and panorama frames.
//!
//! Tiles are laid out on a regular stride. The last column and row are
//! clamped inward so no tile extends past the panorama; near the right and
//! bottom edges tiles may therefore overlap their neighbours.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, GeometryError};

pub const DEFAULT_PANORAMA_WIDTH: u32 = 13_312;
pub const DEFAULT_PANORAMA_HEIGHT: u32 = 6_656;
pub const DEFAULT_TILE_SIZE: u32 = 1_050;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TilingError {
    #[error("tile size {tile} exceeds panorama {width}x{height}")]
    TileTooLarge { tile: u32, width: u32, height: u32 },
    #[error("tile size must be positive")]
    ZeroTile,
    #[error("stride {stride} must be in (0, {tile}]")]
    BadStride { stride: u32, tile: u32 },
    #[error("box {0:?} lies outside the tile")]
    OutsideTile(BoundingBox),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanoramaSpec {
    pub panorama_id: u32,
    pub width: u32,
    pub height: u32,
}

impl PanoramaSpec {
    pub fn new(panorama_id: u32) -> Self {
        Self {
            panorama_id,
            width: DEFAULT_PANORAMA_WIDTH,
            height: DEFAULT_PANORAMA_HEIGHT,
        }
    }
}

/// Placement of one tile inside its panorama.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRef {
    pub panorama_id: u32,
    pub col: u32,
    pub row: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub tile_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: u32,
    pub stride: u32,
    pub cols: u32,
    pub rows: u32,
    pub tiles: Vec<TileRef>,
}

/// Number of tile positions along one axis: `ceil((extent - tile) / stride) + 1`.
pub fn axis_count(extent: u32, tile: u32, stride: u32) -> u32 {
    (extent - tile).div_ceil(stride) + 1
}

fn axis_origins(extent: u32, tile: u32, stride: u32) -> Vec<u32> {
    let last = extent - tile;
    (0..axis_count(extent, tile, stride))
        .map(|i| (i * stride).min(last))
        .collect()
}

/// Lay out the tile grid for one panorama. Tiles are listed row-major.
pub fn make_grid(pano: &PanoramaSpec, tile_size: u32, stride: u32) -> Result<TileGrid, TilingError> {
    if tile_size == 0 {
        return Err(TilingError::ZeroTile);
    }
    if tile_size > pano.width || tile_size > pano.height {
        return Err(TilingError::TileTooLarge {
            tile: tile_size,
            width: pano.width,
            height: pano.height,
        });
    }
    if stride == 0 || stride > tile_size {
        return Err(TilingError::BadStride {
            stride,
            tile: tile_size,
        });
    }
    let xs = axis_origins(pano.width, tile_size, stride);
    let ys = axis_origins(pano.height, tile_size, stride);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (row, &origin_y) in ys.iter().enumerate() {
        for (col, &origin_x) in xs.iter().enumerate() {
            tiles.push(TileRef {
                panorama_id: pano.panorama_id,
                col: col as u32,
                row: row as u32,
                origin_x,
                origin_y,
                tile_size,
            });
        }
    }
    Ok(TileGrid {
        tile_size,
        stride,
        cols: xs.len() as u32,
        rows: ys.len() as u32,
        tiles,
    })
}

/// Map a box from tile coordinates into panorama coordinates.
pub fn tile_to_pano(tile: &TileRef, bbox: &BoundingBox) -> Result<BoundingBox, TilingError> {
    let size = tile.tile_size as f64;
    if !bbox.fits_within(size, size) {
        return Err(TilingError::OutsideTile(*bbox));
    }
    Ok(bbox.translate(tile.origin_x as f64, tile.origin_y as f64)?)
}

/// Inverse of [`tile_to_pano`]; the box must fall inside the tile's footprint.
pub fn pano_to_tile(tile: &TileRef, bbox: &BoundingBox) -> Result<BoundingBox, TilingError> {
    let (ox, oy) = (tile.origin_x as f64, tile.origin_y as f64);
    let size = tile.tile_size as f64;
    if bbox.x_min() < ox || bbox.y_min() < oy || bbox.x_max() > ox + size || bbox.y_max() > oy + size {
        return Err(TilingError::OutsideTile(*bbox));
    }
    bbox.translate(-ox, -oy).map_err(|_| TilingError::OutsideTile(*bbox))
}
