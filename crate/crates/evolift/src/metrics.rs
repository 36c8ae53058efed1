//! Evaluation metrics over root-relative 3D poses: mean per-joint position
//! error in millimeters, the percentage of joints within a distance
//! threshold, and the mean of that percentage over a threshold sweep.
//! Everything here works on plain floats — metrics are read, not trained.

use serde::{Deserialize, Serialize};

/// Threshold for the headline correct-keypoint percentage.
pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// Sweep for the area-under-curve summary: 5mm to 150mm in 5mm steps.
pub fn auc_thresholds() -> impl Iterator<Item = f64> {
    (1..=30).map(|k| k as f64 * 5.0)
}

/// Euclidean distance per joint between two `J x 3` millimeter frames.
pub fn joint_errors(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    assert_eq!(pred.len(), gt.len(), "joint_errors: input lengths differ");
    assert!(
        !pred.is_empty() && pred.len() % 3 == 0,
        "joint_errors: inputs must hold whole xyz triples, got length {}",
        pred.len()
    );
    pred.chunks(3)
        .zip(gt.chunks(3))
        .map(|(p, g)| {
            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
        })
        .collect()
}

/// Mean per-joint position error between two `J x 3` millimeter frames.
pub fn mpjpe(pred: &[f64], gt: &[f64]) -> f64 {
    let errs = joint_errors(pred, gt);
    errs.iter().sum::<f64>() / errs.len() as f64
}

/// Percentage of per-joint errors at or below the threshold (a joint
/// sitting exactly on the threshold counts as correct).
pub fn pck(errors_mm: &[f64], threshold_mm: f64) -> f64 {
    assert!(!errors_mm.is_empty(), "pck: no joint errors to score");
    assert!(
        errors_mm.iter().all(|e| e.is_finite() && *e >= 0.0),
        "pck: errors must be finite and nonnegative"
    );
    let hits = errors_mm.iter().filter(|e| **e <= threshold_mm).count();
    100.0 * hits as f64 / errors_mm.len() as f64
}

/// Mean correct-keypoint percentage over the [`auc_thresholds`] sweep.
pub fn auc(errors_mm: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for t in auc_thresholds() {
        total += pck(errors_mm, t);
        count += 1;
    }
    total / count as f64
}

/// Per-sequence slice of an evaluation, for spotting outlier clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub index: usize,
    pub frames: usize,
    pub mpjpe_mm: f64,
}

/// One evaluation pass over a dataset: headline numbers pooled over every
/// scored joint, plus the per-sequence breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub pck_percent: f64,
    pub auc_percent: f64,
    pub sequences: Vec<SequenceScore>,
}

impl EvalReport {
    /// Pools per-joint errors from every sequence into the headline
    /// numbers. Each entry is `(sequence index, frames scored, per-joint
    /// errors across those frames)`.
    pub fn from_joint_errors(per_sequence: &[(usize, usize, Vec<f64>)]) -> EvalReport {
        let mut pooled = Vec::new();
        let mut sequences = Vec::with_capacity(per_sequence.len());
        for (index, frames, errors) in per_sequence {
            assert!(!errors.is_empty(), "evaluation produced no errors for sequence {index}");
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            sequences.push(SequenceScore { index: *index, frames: *frames, mpjpe_mm: mean });
            pooled.extend_from_slice(errors);
        }
        assert!(!pooled.is_empty(), "evaluation scored no sequences");
        EvalReport {
            mpjpe_mm: pooled.iter().sum::<f64>() / pooled.len() as f64,
            pck_percent: pck(&pooled, PCK_THRESHOLD_MM),
            auc_percent: auc(&pooled),
            sequences,
        }
    }
}
