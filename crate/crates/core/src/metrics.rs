//! Pose accuracy metrics over 3D keypoints.
//!
//! Lengths are in meters except for [`mae`], which reports millimeters.
//! Every threshold test is a strict `<`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KvnError, Result};
use crate::geometry::{KeypointSet3D, Pose};

/// `<2cm` threshold in meters.
pub const LT2CM_THRESHOLD: f64 = 0.02;
/// Fraction of the object diameter accepted by ADD(-S).
pub const ADD_DIAMETER_FRACTION: f64 = 0.1;
/// Upper end of the AUC threshold sweep, in meters.
pub const AUC_MAX_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub gt_pose: Pose,
    pub est_pose: Pose,
    pub keypoints3d: KeypointSet3D,
    pub symmetric: bool,
    pub diameter: f64,
}

impl EvalSample {
    pub fn new(
        gt_pose: Pose,
        est_pose: Pose,
        keypoints3d: KeypointSet3D,
        symmetric: bool,
        diameter: f64,
    ) -> Result<Self> {
        if !(diameter > 0.0) || !diameter.is_finite() {
            return Err(KvnError::DomainError {
                value: diameter,
                domain: "diameter > 0",
            });
        }
        Ok(Self {
            gt_pose,
            est_pose,
            keypoints3d,
            symmetric,
            diameter,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub add_pct: f64,
    pub lt2cm_pct: f64,
    pub auc: f64,
    /// Millimeters.
    pub mae: f64,
}

/// Mean distance between ground-truth and estimated keypoints. Symmetric
/// objects match each estimated keypoint to its nearest ground-truth one.
pub fn keypoint_error(sample: &EvalSample) -> f64 {
    let pts = sample.keypoints3d.points();
    if pts.is_empty() {
        return 0.0;
    }
    let gt: Vec<_> = pts.iter().map(|p| sample.gt_pose.transform(p)).collect();
    let est: Vec<_> = pts.iter().map(|p| sample.est_pose.transform(p)).collect();
    let total: f64 = if sample.symmetric {
        est.iter()
            .map(|e| gt.iter().map(|g| (e - g).norm()).fold(f64::INFINITY, f64::min))
            .sum()
    } else {
        est.iter().zip(&gt).map(|(e, g)| (e - g).norm()).sum()
    };
    total / pts.len() as f64
}

fn pass_pct(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let passed = errors.iter().filter(|&&e| e < threshold).count();
    100.0 * passed as f64 / errors.len() as f64
}

/// Percentage of errors below 2 cm.
pub fn lt2cm(errors: &[f64]) -> f64 {
    pass_pct(errors, LT2CM_THRESHOLD)
}

/// Percentage of errors below a tenth of the object diameter.
pub fn add_s(errors: &[f64], diameter: f64) -> f64 {
    pass_pct(errors, ADD_DIAMETER_FRACTION * diameter)
}

/// Exact area under the pass-rate step curve on `[0, max_threshold]`, in percent.
///
/// An error `e` passes every threshold in `(e, max]`, so it contributes
/// `max(0, max − e)` to the integral.
pub fn auc(errors: &[f64], max_threshold: f64) -> f64 {
    if errors.is_empty() || !(max_threshold > 0.0) {
        return 0.0;
    }
    let area: f64 = errors
        .iter()
        .map(|&e| (max_threshold - e).clamp(0.0, max_threshold))
        .sum();
    100.0 * area / (errors.len() as f64 * max_threshold)
}

/// Mean error in millimeters.
pub fn mae(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    1000.0 * errors.iter().sum::<f64>() / errors.len() as f64
}

/// Breakpoints of the pass-rate step curve as `(threshold, pass_pct)`.
///
/// Starts at `(0, pct of errors < 0)` and records the rate just after each
/// distinct error inside `[0, max]`, ending at `max`.
pub fn auc_curve(errors: &[f64], max_threshold: f64) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    let mut curve = vec![(0.0, 100.0 * sorted.iter().filter(|&&e| e < 0.0).count() as f64 / n)];
    let mut i = 0;
    while i < sorted.len() {
        let e = sorted[i];
        while i < sorted.len() && sorted[i] == e {
            i += 1;
        }
        if e >= 0.0 && e < max_threshold {
            curve.push((e, 100.0 * i as f64 / n));
        }
    }
    let at_max = 100.0 * sorted.iter().filter(|&&e| e < max_threshold).count() as f64 / n;
    curve.push((max_threshold, at_max));
    curve
}

/// Computes all four metrics. ADD(-S) uses each sample's own diameter.
pub fn evaluate(samples: &[EvalSample]) -> MetricReport {
    let errors: Vec<f64> = samples.par_iter().map(keypoint_error).collect();
    let add_passed = samples
        .iter()
        .zip(&errors)
        .filter(|(s, &e)| e < ADD_DIAMETER_FRACTION * s.diameter)
        .count();
    let add_pct = if samples.is_empty() {
        0.0
    } else {
        100.0 * add_passed as f64 / samples.len() as f64
    };
    MetricReport {
        add_pct,
        lt2cm_pct: lt2cm(&errors),
        auc: auc(&errors, AUC_MAX_THRESHOLD),
        mae: mae(&errors),
    }
}
