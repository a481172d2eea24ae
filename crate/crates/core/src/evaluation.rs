//! Scoring a detector against the frozen test set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{match_detections, BoundingBox, Detection, ImageId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluationError {
    #[error("predictions reference image {0}, which is not in the test set")]
    UnknownImage(ImageId),
    #[error("{ious} TP IoU values supplied for {tp} true positives")]
    IouCountMismatch { tp: usize, ious: usize },
}

/// Confusion counts and derived rates for one iteration. Rates are kept at
/// full precision; round only for display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iteration: u32,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tpr: f64,
    pub precision: f64,
    pub f_score: f64,
    pub mean_iou: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Recall, precision, balanced F1 and mean TP IoU. Zero denominators give 0.
pub fn compute_metrics(tp: usize, fn_: usize, fp: usize, tp_ious: &[f64]) -> Result<MetricReport, EvaluationError> {
    if tp_ious.len() != tp {
        return Err(EvaluationError::IouCountMismatch {
            tp,
            ious: tp_ious.len(),
        });
    }
    let tpr = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let f_score = if tpr + precision == 0.0 {
        0.0
    } else {
        2.0 * tpr * precision / (tpr + precision)
    };
    let mean_iou = if tp == 0 {
        0.0
    } else {
        tp_ious.iter().sum::<f64>() / tp as f64
    };
    Ok(MetricReport {
        iteration: 0,
        tp,
        fn_,
        fp,
        tpr,
        precision,
        f_score,
        mean_iou,
    })
}

/// Match each image's predictions against its truth and pool the counts.
/// Test images without predictions contribute their ground truths as misses.
pub fn evaluate(
    preds: &BTreeMap<ImageId, Vec<Detection>>,
    truth: &BTreeMap<ImageId, Vec<BoundingBox>>,
    match_iou: f64,
) -> Result<MetricReport, EvaluationError> {
    if let Some(id) = preds.keys().find(|id| !truth.contains_key(id)) {
        return Err(EvaluationError::UnknownImage(*id));
    }
    let (mut tp, mut fn_, mut fp) = (0, 0, 0);
    let mut ious = Vec::new();
    for (id, gts) in truth {
        let dets = preds.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let m = match_detections(dets, gts, match_iou);
        tp += m.tp();
        fn_ += m.fn_.len();
        fp += m.fp.len();
        ious.extend(m.tp_pairs.iter().map(|p| p.iou));
    }
    compute_metrics(tp, fn_, fp, &ious)
}

/// Column header of the run-level metrics table.
pub const METRICS_CSV_HEADER: &str = "iteration,tp,fn,fp,tpr,precision,f_score,mean_iou";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration, self.tp, self.fn_, self.fp, self.tpr, self.precision, self.f_score, self.mean_iou
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r2(v: f64) -> f64 {
        (v * 100.0).round() / 100.0
    }

    #[test]
    fn first_and_fifth_table_rows() {
        let m = compute_metrics(397, 209, 115, &vec![0.5; 397]).unwrap();
        assert_eq!((r2(m.tpr), r2(m.precision), r2(m.f_score)), (0.66, 0.78, 0.71));
        let m = compute_metrics(493, 113, 51, &vec![0.5; 493]).unwrap();
        assert_eq!((r2(m.tpr), r2(m.precision), r2(m.f_score)), (0.81, 0.91, 0.86));
    }

    #[test]
    fn degenerate_counts() {
        let m = compute_metrics(0, 0, 0, &[]).unwrap();
        assert_eq!((m.tpr, m.precision, m.f_score, m.mean_iou), (0.0, 0.0, 0.0, 0.0));
        assert!(compute_metrics(2, 0, 0, &[1.0]).is_err());
    }

    fn bb(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let truth: BTreeMap<ImageId, Vec<BoundingBox>> =
            [(ImageId(1), vec![bb(0.0), bb(50.0)]), (ImageId(2), vec![bb(5.0)])].into();
        let preds: BTreeMap<ImageId, Vec<Detection>> = truth
            .iter()
            .map(|(id, bs)| (*id, bs.iter().map(|b| Detection::new(*id, *b, 0.9).unwrap()).collect()))
            .collect();
        let m = evaluate(&preds, &truth, 0.5).unwrap();
        assert_eq!((m.tpr, m.precision, m.f_score, m.mean_iou), (1.0, 1.0, 1.0, 1.0));
        let m = evaluate(&BTreeMap::new(), &truth, 0.5).unwrap();
        assert_eq!((m.tp, m.fn_, m.fp), (0, 3, 0));
    }

    #[test]
    fn unknown_image_rejected() {
        let truth: BTreeMap<ImageId, Vec<BoundingBox>> = [(ImageId(1), vec![bb(0.0)])].into();
        let preds = [(ImageId(9), vec![])].into();
        assert_eq!(
            evaluate(&preds, &truth, 0.5),
            Err(EvaluationError::UnknownImage(ImageId(9)))
        );
    }
}
