//! Run directory layout:
//!
//! ```text
//! RUNDIR/
//!   STATUS                    running | complete | failed: <message>
//!   config.json               RunConfig snapshot
//!   world.jsonl               world manifest after the latest iteration
//!   metrics.csv               one row per iteration
//!   report.json               RunReport, written on completion
//!   iter_01/ ... iter_NN/
//!     selection.jsonl         selected batch (absent for the seed round)
//!     raw_predictions.jsonl   pool detections before NMS
//!     predictions.jsonl       pool detections after NMS
//!     test_predictions.jsonl  test-set detections after NMS, every test image
//!     metrics.json            MetricReport plus Table-1 counts
//! ```
//!
//! Nothing in the directory carries a timestamp, so identical runs produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EngineError, IterationArtifacts, IterationResult, RunConfig, RunReport};
use crate::corpus::{load_world, persist_world, World};
use crate::evaluation::{evaluate, MetricReport, METRICS_CSV_HEADER};
use crate::geometry::{BoundingBox, Detection, ImageId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Running,
    Complete,
    Failed(String),
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    image_id: ImageId,
    detections: Vec<Detection>,
}

pub struct RunDir {
    root: PathBuf,
    metrics: Vec<MetricReport>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), EngineError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EngineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_predictions(path: &Path, preds: &BTreeMap<ImageId, Vec<Detection>>) -> Result<(), EngineError> {
    write_jsonl(
        path,
        preds.iter().map(|(&image_id, d)| PredictionLine {
            image_id,
            detections: d.clone(),
        }),
    )
}

pub fn iteration_dir(root: &Path, iteration: u32) -> PathBuf {
    root.join(format!("iter_{iteration:02}"))
}

impl RunDir {
    /// Create (or reuse) the directory and record the config.
    pub fn create(root: impl Into<PathBuf>, cfg: &RunConfig) -> Result<Self, EngineError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let dir = Self {
            root,
            metrics: Vec::new(),
        };
        dir.set_status(&RunStatus::Running)?;
        write_json(&dir.root.join("config.json"), cfg)?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn set_status(&self, status: &RunStatus) -> Result<(), EngineError> {
        let text = match status {
            RunStatus::Running => "running".to_string(),
            RunStatus::Complete => "complete".to_string(),
            RunStatus::Failed(m) => format!("failed: {m}"),
        };
        fs::write(self.root.join("STATUS"), text + "\n")?;
        Ok(())
    }

    pub fn write_iteration(
        &mut self,
        world: &World,
        result: &IterationResult,
        artifacts: &IterationArtifacts,
    ) -> Result<(), EngineError> {
        let dir = iteration_dir(&self.root, result.iteration);
        fs::create_dir_all(&dir)?;
        if let Some(sel) = &artifacts.selection {
            write_jsonl(&dir.join("selection.jsonl"), sel)?;
        }
        write_predictions(&dir.join("raw_predictions.jsonl"), &artifacts.raw_predictions)?;
        write_predictions(&dir.join("predictions.jsonl"), &artifacts.predictions)?;
        write_predictions(&dir.join("test_predictions.jsonl"), &artifacts.test_predictions)?;
        write_json(&dir.join("metrics.json"), result)?;
        persist_world(world, &self.root.join("world.jsonl"))?;

        self.metrics.push(result.metrics);
        let mut csv = String::from(METRICS_CSV_HEADER);
        csv.push('\n');
        for m in &self.metrics {
            csv.push_str(&m.csv_row());
            csv.push('\n');
        }
        fs::write(self.root.join("metrics.csv"), csv)?;
        Ok(())
    }

    pub fn finish(&self, report: &RunReport) -> Result<(), EngineError> {
        write_json(&self.root.join("report.json"), report)?;
        self.set_status(&RunStatus::Complete)
    }
}

pub fn load_report(root: &Path) -> Result<RunReport, EngineError> {
    let text = fs::read_to_string(root.join("report.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<ImageId, Vec<Detection>>, EngineError> {
    let mut out = BTreeMap::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionLine = serde_json::from_str(&line)?;
        out.insert(row.image_id, row.detections);
    }
    Ok(out)
}

/// Recompute an iteration's test metrics from the stored test predictions
/// and the labels in the final world manifest.
pub fn reevaluate_iteration(root: &Path, iteration: u32) -> Result<MetricReport, EngineError> {
    let report = load_report(root)?;
    let available = report.iterations.len() as u32;
    if iteration == 0 || iteration > available {
        return Err(EngineError::IterationOutOfRange {
            requested: iteration,
            available,
        });
    }
    let world = load_world(&root.join("world.jsonl"))?;
    let truth: BTreeMap<ImageId, Vec<BoundingBox>> = world
        .pool
        .test
        .iter()
        .map(|&id| {
            let boxes = world.image(id).map(|r| r.labeled_boxes().to_vec()).unwrap_or_default();
            (id, boxes)
        })
        .collect();
    let preds = read_predictions(&iteration_dir(root, iteration).join("test_predictions.jsonl"))?;
    let mut m = evaluate(&preds, &truth, report.config.match_iou)?;
    m.iteration = iteration;
    Ok(m)
}

/// Drive `engine` to completion, writing every iteration into `root`. On
/// failure the directory is marked failed and the error is returned.
pub fn run_into(engine: &mut super::Engine<'_>, root: impl Into<PathBuf>) -> Result<RunReport, EngineError> {
    let mut dir = RunDir::create(root, engine.config())?;
    match engine.run_with(|w, r, a| dir.write_iteration(w, r, a)) {
        Ok(report) => {
            dir.finish(&report)?;
            Ok(report)
        }
        Err(e) => {
            dir.set_status(&RunStatus::Failed(e.to_string()))?;
            Err(e)
        }
    }
}

pub fn read_status(root: &Path) -> Result<RunStatus, EngineError> {
    let text = fs::read_to_string(root.join("STATUS"))?;
    let text = text.trim_end();
    Ok(match text {
        "running" => RunStatus::Running,
        "complete" => RunStatus::Complete,
        other => RunStatus::Failed(other.strip_prefix("failed: ").unwrap_or(other).to_string()),
    })
}
