//! Central finite-difference verification of analytic gradients. The
//! numeric derivative is a Richardson extrapolation of the differences at
//! `step` and `step/2`.
//!
//! A loss is probed as a function of a flat coordinate vector. Besides its
//! value, every probe reports a signature of the discrete branches it took;
//! a coordinate whose signature changes within `10·step` is next to a
//! sub-gradient kink and is skipped rather than compared.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsac::{dsac_loss, entropy_loss, kvn_loss, mask_loss, GroundTruthAnnotation, PoolSpec};
use crate::error::{KvnError, Result};
use crate::voting::{hypothesis_distribution, Hypothesis, ScoringFunction, SegMask, VectorField};

/// Gradient magnitudes below this fraction of the largest analytic entry
/// (or below this value outright) are compared in absolute terms.
pub const DEFAULT_FLOOR: f64 = 1e-6;
/// Kink exclusion radius, in steps.
pub const KINK_RADIUS_STEPS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn finite_difference_check<F>(f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<Probe> + Sync,
{
    let scale = analytic.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    finite_difference_check_with_floor(f, x, analytic, step, DEFAULT_FLOOR * scale)
}

pub fn finite_difference_check_with_floor<F>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<Probe> + Sync,
{
    if !(step > 0.0) {
        return Err(KvnError::DomainError {
            value: step,
            domain: "finite-difference step > 0",
        });
    }
    if x.len() != analytic.len() {
        return Err(KvnError::shape(
            format!("{} gradient entries", x.len()),
            format!("{}", analytic.len()),
        ));
    }
    let base = f(x)?.signature;
    let outcomes: Vec<Result<Option<f64>>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let at = |delta: f64| -> Result<Probe> {
                let mut moved = x.to_vec();
                moved[i] += delta;
                f(&moved)
            };
            let reach = KINK_RADIUS_STEPS * step;
            let mut probes = [0.0; 4];
            for (slot, delta) in probes.iter_mut().zip([-step, -0.5 * step, 0.5 * step, step]) {
                let p = at(delta)?;
                if p.signature != base {
                    return Ok(None);
                }
                *slot = p.value;
            }
            for delta in [-reach, reach] {
                if at(delta)?.signature != base {
                    return Ok(None);
                }
            }
            // Richardson extrapolation of two central differences.
            let wide = (probes[3] - probes[0]) / (2.0 * step);
            let narrow = (probes[2] - probes[1]) / step;
            let numeric = (4.0 * narrow - wide) / 3.0;
            Ok(Some(relative_error(analytic[i], numeric, floor)))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for outcome in outcomes {
        match outcome? {
            Some(err) => {
                report.checked += 1;
                report.max_rel_error = report.max_rel_error.max(err);
            }
            None => report.skipped_kinks += 1,
        }
    }
    Ok(report)
}

/// Flat view over the differentiable inputs of the voting losses:
/// every field component, then every mask value, then `α`.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub fields: Vec<VectorField>,
    pub mask: SegMask,
    pub alpha: f64,
}

impl LossInputs {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for field in &self.fields {
            for v in field.data() {
                out.push(v.x);
                out.push(v.y);
            }
        }
        out.extend_from_slice(self.mask.data());
        out.push(self.alpha);
        out
    }

    /// Rebuilds inputs from a flat vector; mask values are not range-checked
    /// so that probes may step slightly outside `[0, 1]`.
    pub fn from_flat(&self, flat: &[f64]) -> LossInputs {
        let (w, h) = (self.mask.width(), self.mask.height());
        let n = w * h;
        let mut offset = 0;
        let fields = self
            .fields
            .iter()
            .map(|_| {
                let data = (0..n)
                    .map(|p| Vector2::new(flat[offset + 2 * p], flat[offset + 2 * p + 1]))
                    .collect();
                offset += 2 * n;
                VectorField::new(w, h, data).expect("field shape")
            })
            .collect();
        let mut mask = self.mask.clone();
        mask.data_mut().copy_from_slice(&flat[offset..offset + n]);
        LossInputs {
            fields,
            mask,
            alpha: flat[offset + n],
        }
    }

    fn flatten_grads(fields: &[VectorField], mask: &[f64], alpha: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for field in fields {
            for v in field.data() {
                out.push(v.x);
                out.push(v.y);
            }
        }
        out.extend_from_slice(mask);
        out.push(alpha);
        out
    }
}

/// Gradient check of the expected keypoint loss over fields, mask and `α`.
pub fn check_dsac_loss(
    inputs: &LossInputs,
    annotation: &GroundTruthAnnotation,
    pool: &PoolSpec,
    sf: &ScoringFunction,
    step: f64,
) -> Result<GradCheckReport> {
    let res = dsac_loss(&inputs.fields, &inputs.mask, annotation, pool, sf, inputs.alpha)?;
    let analytic = LossInputs::flatten_grads(&res.grad_fields, &res.grad_mask, res.grad_alpha);
    finite_difference_check(
        |flat| {
            let moved = inputs.from_flat(flat);
            let r = dsac_loss(&moved.fields, &moved.mask, annotation, pool, sf, moved.alpha)?;
            Ok(Probe {
                value: r.loss,
                signature: r.signature,
            })
        },
        &inputs.to_flat(),
        &analytic,
        step,
    )
}

/// Gradient check of the combined mask + keypoint loss.
pub fn check_kvn_loss(
    inputs: &LossInputs,
    annotation: &GroundTruthAnnotation,
    pool: &PoolSpec,
    sf: &ScoringFunction,
    step: f64,
) -> Result<GradCheckReport> {
    let res = kvn_loss(&inputs.fields, &inputs.mask, annotation, pool, sf, inputs.alpha)?;
    let analytic = LossInputs::flatten_grads(&res.grad_fields, &res.grad_mask, res.grad_alpha);
    finite_difference_check(
        |flat| {
            let moved = inputs.from_flat(flat);
            let r = kvn_loss(&moved.fields, &moved.mask, annotation, pool, sf, moved.alpha)?;
            Ok(Probe {
                value: r.loss,
                signature: r.signature,
            })
        },
        &inputs.to_flat(),
        &analytic,
        step,
    )
}

/// Gradient check of the mask cross-entropy over the mask values.
pub fn check_mask_loss(mask: &SegMask, gt_mask: &SegMask, step: f64) -> Result<GradCheckReport> {
    let res = mask_loss(mask, gt_mask)?;
    finite_difference_check(
        |flat| {
            let mut moved = mask.clone();
            moved.data_mut().copy_from_slice(flat);
            let r = mask_loss(&moved, gt_mask)?;
            Ok(Probe {
                value: r.loss,
                signature: r.signature,
            })
        },
        mask.data(),
        &res.grad,
        step,
    )
}

/// Gradient check of the entropy loss with respect to `α` for fixed scores.
pub fn check_entropy_loss(scores: &[f64], alpha: f64, target: f64, step: f64) -> Result<GradCheckReport> {
    let dist_at = |a: f64| {
        let pool = scores
            .iter()
            .map(|&score| Hypothesis {
                keypoint: 0,
                position: Vector2::zeros(),
                sources: [Vector2::zeros(); 2],
                valid: true,
                score,
            })
            .collect();
        hypothesis_distribution(pool, a)
    };
    let (_, grad) = entropy_loss(&dist_at(alpha)?, target)?;
    finite_difference_check(
        |flat| {
            let dist = dist_at(flat[0])?;
            let (value, _) = entropy_loss(&dist, target)?;
            Ok(Probe {
                value,
                signature: (dist.entropy() >= target) as u64,
            })
        },
        &[alpha],
        &[grad],
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let coeffs = [0.5, -1.25, 3.0, 0.1, 2.0];
        let lin = [1.0, 0.0, -2.0, 0.3, 0.7];
        let x = [0.3, -1.7, 0.9, 4.0, -0.2];
        let grad: Vec<f64> = (0..5).map(|i| 2.0 * coeffs[i] * x[i] + lin[i]).collect();
        let report = finite_difference_check(
            |v| {
                let value = (0..5).map(|i| coeffs[i] * v[i] * v[i] + lin[i] * v[i]).sum();
                Ok(Probe { value, signature: 0 })
            },
            &x,
            &grad,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 5);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let report = finite_difference_check(
            |v| {
                Ok(Probe {
                    value: v[0] * v[0],
                    signature: 0,
                })
            },
            &[1.0],
            &[3.0],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.3);
    }

    #[test]
    fn kinks_are_skipped() {
        // |x| at x = 5e-5 is within ten steps of the kink at 0.
        let report = finite_difference_check(
            |v| {
                Ok(Probe {
                    value: v[0].abs(),
                    signature: (v[0] >= 0.0) as u64,
                })
            },
            &[5e-5, 1.0],
            &[1.0, 0.0],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn rejects_bad_step() {
        let err = finite_difference_check(
            |_| {
                Ok(Probe {
                    value: 0.0,
                    signature: 0,
                })
            },
            &[0.0],
            &[0.0],
            0.0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn report_schema() {
        let r = GradCheckReport {
            max_rel_error: 1e-6,
            checked: 3,
            skipped_kinks: 1,
        };
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 3);
        for k in ["max_rel_error", "checked", "skipped_kinks"] {
            assert!(keys.contains(&k));
        }
    }
}
