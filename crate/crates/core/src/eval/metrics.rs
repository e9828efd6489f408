//! Success, precision and normalized precision curves.
//!
//! Success counts `IoU > t` (strict), the two precision variants count
//! `distance <= t`. Frame 0 of every run is the initialization frame and is
//! never scored.

use serde::{Deserialize, Serialize};

use crate::bbox::{cle, iou, XywhBox};
use crate::error::{Error, Result};

pub const SUCCESS_STEPS: usize = 20;
pub const PRECISION_MAX_PX: usize = 50;
pub const PRECISION_AT_PX: usize = 20;
pub const NORM_STEPS: usize = 50;

pub fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS).map(|k| k as f64 / SUCCESS_STEPS as f64).collect()
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..=PRECISION_MAX_PX).map(|k| k as f64).collect()
}

/// `0, 0.01, ..., 0.5`.
pub fn norm_thresholds() -> Vec<f64> {
    (0..=NORM_STEPS).map(|k| k as f64 / 100.0).collect()
}

/// One-pass tracking result for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRun {
    pub sequence: String,
    pub predictions: Vec<XywhBox>,
    pub groundtruth: Vec<XywhBox>,
    pub cle: Vec<f64>,
    pub iou: Vec<f64>,
    /// Frames where the raw prediction was degenerate and the previous box was kept.
    pub degenerate_frames: usize,
}

impl TrackRun {
    pub fn from_boxes(sequence: &str, predictions: Vec<XywhBox>, groundtruth: Vec<XywhBox>) -> Result<Self> {
        if predictions.len() != groundtruth.len() {
            return Err(Error::Eval {
                sequence: sequence.to_string(),
                message: format!(
                    "{} predicted boxes for {} groundtruth frames",
                    predictions.len(),
                    groundtruth.len()
                ),
            });
        }
        let cle = predictions.iter().zip(&groundtruth).map(|(p, g)| cle(p, g)).collect();
        let iou = predictions
            .iter()
            .zip(&groundtruth)
            .map(|(p, g)| iou(&p.to_corners(), &g.to_corners()))
            .collect();
        Ok(Self {
            sequence: sequence.to_string(),
            predictions,
            groundtruth,
            cle,
            iou,
            degenerate_frames: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// Center error scaled by groundtruth size; `None` for zero-size groundtruth.
    pub fn norm_distance(&self, frame: usize) -> Option<f64> {
        let (p, g) = (&self.predictions[frame], &self.groundtruth[frame]);
        if !(g.w > 0.0 && g.h > 0.0) {
            return None;
        }
        let (pc, gc) = (p.center(), g.center());
        Some(((pc.0 - gc.0) / g.w).hypot((pc.1 - gc.1) / g.h))
    }
}

/// Per-frame values pooled over runs, initialization frames excluded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PooledFrames {
    pub iou: Vec<f64>,
    pub cle: Vec<f64>,
    pub norm: Vec<f64>,
    pub norm_skipped: usize,
}

pub fn pool<'a>(runs: impl IntoIterator<Item = &'a TrackRun>) -> PooledFrames {
    let mut out = PooledFrames::default();
    for run in runs {
        for f in 1..run.len() {
            out.iou.push(run.iou[f]);
            out.cle.push(run.cle[f]);
            match run.norm_distance(f) {
                Some(d) => out.norm.push(d),
                None => out.norm_skipped += 1,
            }
        }
    }
    out
}

fn rate(count: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        count as f64 / n as f64
    }
}

pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    success_thresholds()
        .iter()
        .map(|t| rate(ious.iter().filter(|v| *v > t).count(), ious.len()))
        .collect()
}

pub fn precision_curve(cles: &[f64]) -> Vec<f64> {
    precision_thresholds()
        .iter()
        .map(|t| rate(cles.iter().filter(|v| *v <= t).count(), cles.len()))
        .collect()
}

pub fn norm_precision_curve(dists: &[f64]) -> Vec<f64> {
    norm_thresholds()
        .iter()
        .map(|t| rate(dists.iter().filter(|v| *v <= t).count(), dists.len()))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean over sorted values, so the result does not depend on pooling order.
fn order_free_mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    mean(&s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub mean_iou: f64,
    pub success_curve: Vec<f64>,
    pub success_score: f64,
    pub precision_curve: Vec<f64>,
    /// Rate at 20 px.
    pub precision_score: f64,
    pub norm_precision_curve: Vec<f64>,
    pub norm_precision_score: f64,
    /// Frames left out of normalized precision because the groundtruth has zero size.
    pub norm_skipped: usize,
}

impl MetricsReport {
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = &'a TrackRun>) -> Self {
        Self::from_pooled(&pool(runs))
    }

    pub fn from_pooled(p: &PooledFrames) -> Self {
        let success_curve = success_curve(&p.iou);
        let precision_curve = precision_curve(&p.cle);
        let norm_precision_curve = norm_precision_curve(&p.norm);
        Self {
            frames: p.iou.len(),
            mean_iou: order_free_mean(&p.iou),
            success_score: mean(&success_curve),
            precision_score: precision_curve[PRECISION_AT_PX],
            norm_precision_score: mean(&norm_precision_curve),
            success_curve,
            precision_curve,
            norm_precision_curve,
            norm_skipped: p.norm_skipped,
        }
    }

    /// Success non-increasing, both precision curves non-decreasing, rates in `[0, 1]`.
    pub fn curves_are_monotone(&self) -> bool {
        let in_unit = |c: &[f64]| c.iter().all(|v| (0.0..=1.0).contains(v));
        in_unit(&self.success_curve)
            && in_unit(&self.precision_curve)
            && in_unit(&self.norm_precision_curve)
            && self.success_curve.windows(2).all(|w| w[1] <= w[0])
            && self.precision_curve.windows(2).all(|w| w[1] >= w[0])
            && self.norm_precision_curve.windows(2).all(|w| w[1] >= w[0])
    }
}
