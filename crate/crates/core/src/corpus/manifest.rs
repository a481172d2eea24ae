//! Line-delimited JSON manifest: one header line carrying the format version
//! and world config, then one record per image.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pool::{PoolMembership, PoolState};
use super::world::{GroundTruthObject, ImageRecord, LabelState, World, WorldConfig};
use crate::geometry::ImageId;
use crate::tiling::TileRef;

pub const MANIFEST_FORMAT: &str = "alforge-manifest/1";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io: {0}")]
    Io(#[from] io::Error),
    #[error("manifest is empty (missing header)")]
    MissingHeader,
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("unsupported manifest format {0:?}, expected {MANIFEST_FORMAT:?}")]
    Format(String),
    #[error("manifest truncated: header announces {expected} records, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Inconsistent { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    records: usize,
    config: WorldConfig,
    test_frozen: bool,
    iteration_history: Vec<Vec<ImageId>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_id: ImageId,
    panorama_id: u32,
    col: u32,
    row: u32,
    origin_x: u32,
    origin_y: u32,
    pool: PoolMembership,
    label_state: LabelState,
    gt: Vec<GroundTruthObject>,
    distractors: u32,
}

fn parse_line<T: serde::de::DeserializeOwned>(line_no: usize, text: &str) -> Result<T, ManifestError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ManifestError::Malformed {
            line: line_no,
            field: if path.is_empty() { ".".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

pub fn write_manifest(world: &World, out: impl Write) -> Result<(), ManifestError> {
    let mut out = BufWriter::new(out);
    let header = Header {
        format: MANIFEST_FORMAT.to_string(),
        records: world.images.len(),
        config: world.config.clone(),
        test_frozen: world.pool.test_frozen,
        iteration_history: world.pool.iteration_history.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    for r in &world.images {
        let pool = world
            .pool
            .membership(r.image_id)
            .ok_or_else(|| ManifestError::Inconsistent {
                line: 0,
                message: format!("image {} missing from pool", r.image_id),
            })?;
        let rec = Record {
            image_id: r.image_id,
            panorama_id: r.tile.panorama_id,
            col: r.tile.col,
            row: r.tile.row,
            origin_x: r.tile.origin_x,
            origin_y: r.tile.origin_y,
            pool,
            label_state: r.label_state.clone(),
            gt: r.gt.clone(),
            distractors: r.distractors,
        };
        serde_json::to_writer(&mut out, &rec).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parse a manifest. Nothing is returned unless every line is valid.
pub fn read_manifest(input: impl io::Read) -> Result<World, ManifestError> {
    let mut lines = BufReader::new(input).lines();
    let header_text = lines.next().ok_or(ManifestError::MissingHeader)??;
    let header: Header = parse_line(1, &header_text)?;
    if header.format != MANIFEST_FORMAT {
        return Err(ManifestError::Format(header.format));
    }
    let mut images = Vec::with_capacity(header.records);
    let mut pool = PoolState::default();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = parse_line(line_no, &text)?;
        if rec.image_id.0 as usize != images.len() {
            return Err(ManifestError::Inconsistent {
                line: line_no,
                message: format!("expected image_id {}, found {}", images.len(), rec.image_id),
            });
        }
        let labeled = matches!(rec.label_state, LabelState::Boxed { .. });
        match rec.pool {
            PoolMembership::Train | PoolMembership::Test if !labeled => {
                return Err(ManifestError::Inconsistent {
                    line: line_no,
                    message: "train/test image must be boxed".into(),
                })
            }
            PoolMembership::Unlabeled if rec.label_state != LabelState::Unlabeled => {
                return Err(ManifestError::Inconsistent {
                    line: line_no,
                    message: "unlabeled-pool image carries a label".into(),
                })
            }
            _ => {}
        }
        let set = match rec.pool {
            PoolMembership::Unlabeled => &mut pool.unlabeled,
            PoolMembership::Train => &mut pool.train,
            PoolMembership::Test => &mut pool.test,
            PoolMembership::Discarded => &mut pool.discarded,
        };
        set.insert(rec.image_id);
        images.push(ImageRecord {
            image_id: rec.image_id,
            tile: TileRef {
                panorama_id: rec.panorama_id,
                col: rec.col,
                row: rec.row,
                origin_x: rec.origin_x,
                origin_y: rec.origin_y,
                tile_size: header.config.tile_size,
            },
            gt: rec.gt,
            distractors: rec.distractors,
            label_state: rec.label_state,
        });
    }
    if images.len() != header.records {
        return Err(ManifestError::Truncated {
            expected: header.records,
            found: images.len(),
        });
    }
    pool.iteration_history = header.iteration_history;
    pool.test_frozen = header.test_frozen;
    pool.validate(Some(images.len()))
        .map_err(|e| ManifestError::Inconsistent {
            line: 1,
            message: e.to_string(),
        })?;
    Ok(World {
        config: header.config,
        images,
        pool,
    })
}

/// Write via a temporary sibling file and rename, so readers never observe a
/// half-written manifest.
pub fn persist_world(world: &World, path: &Path) -> Result<(), ManifestError> {
    let tmp = path.with_extension("jsonl.tmp");
    write_manifest(world, fs::File::create(&tmp)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World, ManifestError> {
    read_manifest(fs::File::open(path)?)
}
