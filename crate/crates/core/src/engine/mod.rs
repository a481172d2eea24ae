//! The active-learning loop.
//!
//! Iteration 1 is the seed round: a random sample of the corpus is reviewed,
//! positives are boxed and split into train and a test set that stays frozen
//! for the rest of the run. Every later iteration predicts on the remaining
//! pool, buckets images by confidence, selects a batch, sends it through
//! review and boxing, refits on the cumulative training set and evaluates on
//! the test set.

mod rundir;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    initial_sample, split_train_test, ImageRecord, LabelError, LabelState, ManifestError, PoolError, World,
    WorldConfig, WorldError,
};
use crate::detector::{Detector, DetectorError, SimParams};
use crate::evaluation::{evaluate, EvaluationError, MetricReport};
use crate::geometry::{greedy_nms, validate_match_iou, BoundingBox, Detection, GeometryError, ImageId, NmsConfig};
use crate::oracle::{Annotator, OracleConfig, OracleError};
use crate::rng;
use crate::selection::{
    image_confidence, partition_pool, random_batch, select_batch, BucketThresholds, SelectedImage, SelectionError,
    SelectionPlan,
};

pub use rundir::{
    iteration_dir, load_report, read_predictions, read_status, reevaluate_iteration, run_into, RunDir, RunStatus,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("seed round found {found} positive image(s) in a sample of {sampled}; raise the initial fraction or the sign prevalence")]
    TooFewSeedPositives { sampled: usize, found: usize },
    #[error("engine needs a fresh world with every image unlabeled")]
    WorldNotFresh,
    #[error("the unlabeled pool is exhausted")]
    PoolExhausted,
    #[error("seed round has not run yet")]
    NotSeeded,
    #[error("iteration out of range: {requested} (run has {available})")]
    IterationOutOfRange { requested: u32, available: u32 },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("run directory: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Active,
    RandomBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub initial_fraction: f64,
    pub train_ratio: f64,
    pub plan: SelectionPlan,
    pub thresholds: BucketThresholds,
    pub nms: NmsConfig,
    pub match_iou: f64,
    pub oracle: OracleConfig,
    pub sim: SimParams,
    pub max_iterations: u32,
    pub plateau_epsilon: f64,
    pub plateau_patience: usize,
    pub mode: RunMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            initial_fraction: 0.15,
            train_ratio: 0.6,
            plan: SelectionPlan::default(),
            thresholds: BucketThresholds::default(),
            nms: NmsConfig::default(),
            match_iou: crate::geometry::DEFAULT_MATCH_IOU,
            oracle: OracleConfig::default(),
            sim: SimParams::default(),
            max_iterations: 7,
            plateau_epsilon: 0.01,
            plateau_patience: 2,
            mode: RunMode::Active,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.world.validate()?;
        if !(self.initial_fraction > 0.0 && self.initial_fraction <= 1.0) {
            return Err(EngineError::Config("initial_fraction must be in (0, 1]".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(EngineError::Config("train_ratio must be in (0, 1)".into()));
        }
        self.plan.validate()?;
        self.thresholds.validate()?;
        self.nms.validate()?;
        validate_match_iou(self.match_iou)?;
        self.oracle.validate()?;
        if self.max_iterations == 0 {
            return Err(EngineError::Config("max_iterations must be >= 1".into()));
        }
        if self.plateau_epsilon.is_nan() || self.plateau_epsilon < 0.0 || self.plateau_patience == 0 {
            return Err(EngineError::Config(
                "plateau_epsilon must be >= 0 and plateau_patience >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the run's Table-1/Table-2 style history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub iteration: u32,
    pub added_images: usize,
    pub added_annotations: usize,
    pub cumulative_images: usize,
    pub cumulative_annotations: usize,
    /// Images sent to review this iteration.
    pub reviewed: usize,
    /// Reviewed-negative images removed from the corpus this iteration.
    pub discarded: usize,
    /// Budget left unfilled because the pool was too small.
    pub shortfall: usize,
    pub train_loss: Option<f64>,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    MaxIterations,
    PoolExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub detector: String,
    pub test_images: usize,
    pub test_annotations: usize,
    pub iterations: Vec<IterationResult>,
    pub stop_reason: StopReason,
}

/// Plateau rule: the last `patience` F-score changes are all within `eps` in
/// absolute value. `eps == 0` disables the rule. A 1e-9 slack absorbs float
/// noise in differences of two-decimal values.
pub fn should_stop(f_scores: &[f64], eps: f64, patience: usize) -> bool {
    if eps <= 0.0 || patience == 0 || f_scores.len() < patience + 1 {
        return false;
    }
    f_scores
        .windows(2)
        .rev()
        .take(patience)
        .all(|w| (w[1] - w[0]).abs() <= eps + 1e-9)
}

/// Everything an iteration produced, for artifact writing and inspection.
#[derive(Debug, Clone, Default)]
pub struct IterationArtifacts {
    pub selection: Option<Vec<SelectedImage>>,
    pub raw_predictions: BTreeMap<ImageId, Vec<Detection>>,
    pub predictions: BTreeMap<ImageId, Vec<Detection>>,
    pub test_predictions: BTreeMap<ImageId, Vec<Detection>>,
}

pub struct Engine<'a> {
    cfg: RunConfig,
    world: World,
    detector: Box<dyn Detector + 'a>,
    annotator: Box<dyn Annotator + 'a>,
    history: Vec<IterationResult>,
    total_images: usize,
}

fn annotations(records: &[&ImageRecord]) -> usize {
    records.iter().map(|r| r.labeled_boxes().len()).sum()
}

impl<'a> Engine<'a> {
    pub fn new(
        cfg: RunConfig,
        world: World,
        detector: Box<dyn Detector + 'a>,
        annotator: Box<dyn Annotator + 'a>,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        let fresh = world.pool.unlabeled.len() == world.images.len()
            && world.images.iter().all(|r| r.label_state == LabelState::Unlabeled);
        if !fresh {
            return Err(EngineError::WorldNotFresh);
        }
        let total_images = world.images.len();
        Ok(Self {
            cfg,
            world,
            detector,
            annotator,
            history: Vec::new(),
            total_images,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[IterationResult] {
        &self.history
    }

    pub fn detector_name(&self) -> &str {
        self.detector.name()
    }

    fn next_iteration(&self) -> u32 {
        self.history.len() as u32 + 1
    }

    fn records(&self, ids: &[ImageId]) -> Vec<&ImageRecord> {
        ids.iter()
            .map(|&id| self.world.image(id).expect("pool ids index the world"))
            .collect()
    }

    fn post_nms(&self, raw: &BTreeMap<ImageId, Vec<Detection>>) -> BTreeMap<ImageId, Vec<Detection>> {
        raw.iter().map(|(&id, d)| (id, greedy_nms(d, &self.cfg.nms))).collect()
    }

    fn evaluate_test(
        &mut self,
        iteration: u32,
    ) -> Result<(MetricReport, BTreeMap<ImageId, Vec<Detection>>), EngineError> {
        let test: Vec<ImageId> = self.world.pool.test.iter().copied().collect();
        let raw = self.detector.predict(&self.world, &test, iteration)?;
        let preds = self.post_nms(&raw);
        let truth: BTreeMap<ImageId, Vec<BoundingBox>> = self
            .records(&test)
            .into_iter()
            .map(|r| (r.image_id, r.labeled_boxes().to_vec()))
            .collect();
        let mut metrics = evaluate(&preds, &truth, self.cfg.match_iou)?;
        metrics.iteration = iteration;
        Ok((metrics, preds))
    }

    /// Review `ids`, box the positives, and return the relabeled copies split
    /// into positives and negatives. The world is not touched.
    fn label(&self, ids: &[ImageId], iteration: u32) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>), EngineError> {
        let mut work: Vec<ImageRecord> = self.records(ids).into_iter().cloned().collect();
        let answers = self.annotator.review(&work.iter().collect::<Vec<_>>(), iteration)?;
        for (rec, contains) in work.iter_mut().zip(answers) {
            rec.mark_reviewed(contains)?;
        }
        let (mut pos, neg): (Vec<ImageRecord>, Vec<ImageRecord>) = work
            .into_iter()
            .partition(|r| r.label_state == LabelState::Reviewed { contains: true });
        let boxes = self.annotator.boxes(&pos.iter().collect::<Vec<_>>(), iteration)?;
        for (rec, b) in pos.iter_mut().zip(boxes) {
            rec.mark_boxed(b)?;
        }
        Ok((pos, neg))
    }

    fn commit(&mut self, records: Vec<ImageRecord>) {
        for rec in records {
            let id = rec.image_id;
            *self.world.image_mut(id).expect("labeled ids index the world") = rec;
        }
    }

    fn derived_seed(&self, tag: &str, iteration: u32) -> u64 {
        rng::keyed(self.cfg.seed, tag, &[iteration as u64]).random()
    }

    /// Iteration 1: random seed sample, review, box, split, fit, evaluate.
    pub fn run_seed_round(&mut self) -> Result<(IterationResult, IterationArtifacts), EngineError> {
        if !self.history.is_empty() {
            return Err(EngineError::Config("seed round already ran".into()));
        }
        let iteration = 1;
        self.annotator.begin_iteration(iteration);
        let sample = initial_sample(&self.world.pool, self.cfg.initial_fraction, self.cfg.seed)?;
        let (pos, neg) = self.label(&sample, iteration)?;
        if pos.len() < 2 {
            return Err(EngineError::TooFewSeedPositives {
                sampled: sample.len(),
                found: pos.len(),
            });
        }
        let pos_ids: Vec<ImageId> = pos.iter().map(|r| r.image_id).collect();
        let neg_ids: Vec<ImageId> = neg.iter().map(|r| r.image_id).collect();
        let (train, test) = split_train_test(&pos_ids, self.cfg.train_ratio, self.cfg.seed)?;

        let mut pool = self.world.pool.clone();
        pool.discard(&neg_ids)?;
        pool.freeze_test(&test)?;
        pool.add_to_train(&train)?;
        self.commit(pos);
        self.commit(neg);
        self.world.pool = pool;

        self.finish_iteration(
            iteration,
            train,
            sample.len(),
            neg_ids.len(),
            0,
            None,
            BTreeMap::new(),
            BTreeMap::new(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_iteration(
        &mut self,
        iteration: u32,
        added: Vec<ImageId>,
        reviewed: usize,
        discarded: usize,
        shortfall: usize,
        selection: Option<Vec<SelectedImage>>,
        raw_predictions: BTreeMap<ImageId, Vec<Detection>>,
        predictions: BTreeMap<ImageId, Vec<Detection>>,
    ) -> Result<(IterationResult, IterationArtifacts), EngineError> {
        let fit = self.detector.fit(&self.world, iteration)?;
        let (metrics, test_predictions) = self.evaluate_test(iteration)?;
        let added_annotations = annotations(&self.records(&added));
        let train: Vec<ImageId> = self.world.pool.train.iter().copied().collect();
        let result = IterationResult {
            iteration,
            added_images: added.len(),
            added_annotations,
            cumulative_images: train.len(),
            cumulative_annotations: annotations(&self.records(&train)),
            reviewed,
            discarded,
            shortfall,
            train_loss: fit.loss,
            metrics,
        };
        self.world.pool.validate(Some(self.total_images))?;
        self.history.push(result.clone());
        Ok((
            result,
            IterationArtifacts {
                selection,
                raw_predictions,
                predictions,
                test_predictions,
            },
        ))
    }

    /// One selection round on the remaining pool.
    pub fn run_iteration(&mut self) -> Result<(IterationResult, IterationArtifacts), EngineError> {
        if self.history.is_empty() {
            return Err(EngineError::NotSeeded);
        }
        if self.world.pool.unlabeled.is_empty() {
            return Err(EngineError::PoolExhausted);
        }
        let iteration = self.next_iteration();
        self.annotator.begin_iteration(iteration);
        let pool_ids: Vec<ImageId> = self.world.pool.unlabeled.iter().copied().collect();
        let raw = self.detector.predict(&self.world, &pool_ids, iteration)?;
        let post = self.post_nms(&raw);
        let scores: BTreeMap<ImageId, Option<f64>> = pool_ids
            .iter()
            .map(|id| (*id, post.get(id).and_then(|d| image_confidence(d))))
            .collect();
        let buckets = partition_pool(&scores, &self.cfg.thresholds)?;
        let select_seed = self.derived_seed("selection", iteration);
        let selection = match self.cfg.mode {
            RunMode::Active => select_batch(&buckets, &self.cfg.plan, select_seed)?,
            RunMode::RandomBaseline => random_batch(&buckets, self.cfg.plan.budget, select_seed),
        };
        let batch = selection.ids();
        let (pos, neg) = self.label(&batch, iteration)?;
        let pos_ids: Vec<ImageId> = pos.iter().map(|r| r.image_id).collect();
        let neg_ids: Vec<ImageId> = neg.iter().map(|r| r.image_id).collect();

        let mut pool = self.world.pool.clone();
        pool.discard(&neg_ids)?;
        pool.add_to_train(&pos_ids)?;
        self.commit(pos);
        self.commit(neg);
        self.world.pool = pool;

        let raw_nonempty = raw.into_iter().filter(|(_, d)| !d.is_empty()).collect();
        let post_nonempty = post.into_iter().filter(|(_, d)| !d.is_empty()).collect();
        self.finish_iteration(
            iteration,
            pos_ids,
            batch.len(),
            neg_ids.len(),
            selection.shortfall,
            Some(selection.picks),
            raw_nonempty,
            post_nonempty,
        )
    }

    /// Stop decision after the latest iteration, if any.
    pub fn stop_reason(&self) -> Option<StopReason> {
        let n = self.history.len() as u32;
        if n == 0 {
            return None;
        }
        let f: Vec<f64> = self.history.iter().map(|r| r.metrics.f_score).collect();
        if n >= self.cfg.max_iterations {
            Some(StopReason::MaxIterations)
        } else if should_stop(&f, self.cfg.plateau_epsilon, self.cfg.plateau_patience) {
            Some(StopReason::Plateau)
        } else if self.world.pool.unlabeled.is_empty() {
            Some(StopReason::PoolExhausted)
        } else {
            None
        }
    }

    pub fn report(&self, stop_reason: StopReason) -> RunReport {
        RunReport {
            config: self.cfg.clone(),
            detector: self.detector.name().to_string(),
            test_images: self.world.pool.test.len(),
            test_annotations: annotations(&self.records(&self.world.pool.test.iter().copied().collect::<Vec<_>>())),
            iterations: self.history.clone(),
            stop_reason,
        }
    }

    /// Run to completion, handing each iteration's artifacts to `on_iteration`.
    pub fn run_with(
        &mut self,
        mut on_iteration: impl FnMut(&World, &IterationResult, &IterationArtifacts) -> Result<(), EngineError>,
    ) -> Result<RunReport, EngineError> {
        let (r, a) = self.run_seed_round()?;
        on_iteration(&self.world, &r, &a)?;
        loop {
            if let Some(reason) = self.stop_reason() {
                return Ok(self.report(reason));
            }
            let (r, a) = self.run_iteration()?;
            on_iteration(&self.world, &r, &a)?;
        }
    }

    pub fn run(&mut self) -> Result<RunReport, EngineError> {
        self.run_with(|_, _, _| Ok(()))
    }
}
