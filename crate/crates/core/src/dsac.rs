//! Training-side losses of the differentiable voting layer.
//!
//! The expected keypoint loss is `Σ_j Σ_l P(h_{j,l}) ‖h_{j,l} − k*_j‖²` with
//! `P = softmax(α·S)` over the valid hypotheses of a pool sampled from the
//! seed. Gradients flow through two chains: the hypothesis positions, which
//! depend on the two sampled votes, and the scores, which depend on every
//! pixel with a non-zero mask value.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{KvnError, Result};
use crate::rng;
use crate::voting::{
    check_shapes, hypothesis_distribution, hypothesis_from_pixels, pixel_center, prune_hypothesis, sample_pair,
    HypothesisDistribution, ScoringFunction, SegMask, VectorField, ZERO_NORM,
};

/// Clamp applied to mask predictions before the cross-entropy.
pub const MASK_EPS: f64 = 1e-7;
/// Default entropy target of the hypothesis distribution, in nats.
pub const DEFAULT_ENTROPY_TARGET: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthAnnotation {
    pub keypoints2d: Vec<Vector2<f64>>,
    pub gt_mask: SegMask,
}

/// Size and seed of the per-keypoint hypothesis pools. Keypoint `j` draws from
/// stream `j` of `seed`, so a pool is a pure function of `(mask, field, spec)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DsacLossResult {
    pub loss: f64,
    /// `∂l/∂V_j(p)`, one raster per keypoint.
    pub grad_fields: Vec<VectorField>,
    /// `∂l/∂M(p)`, row-major.
    pub grad_mask: Vec<f64>,
    pub grad_alpha: f64,
    /// The scored pools, one per keypoint.
    pub distributions: Vec<HypothesisDistribution>,
    /// Hash of every discrete branch taken (eligibility, validity, scoring
    /// branch per pixel); equal signatures mean the loss is smooth between two inputs.
    pub signature: u64,
}

struct PoolEntry {
    r: usize,
    s: usize,
}

struct KeypointTerm {
    loss: f64,
    grad_field: Vec<Vector2<f64>>,
    grad_mask: Vec<f64>,
    grad_alpha: f64,
    distribution: HypothesisDistribution,
    signature: u64,
}

/// Jacobians of the intersection `h = p_r + v_r·((p_s − p_r) ⊥ v_s)/(v_r ⊥ v_s)`
/// with respect to the raw votes `v_r` and `v_s`.
pub(crate) fn intersection_jacobians(
    p_r: &Vector2<f64>,
    v_r: &Vector2<f64>,
    p_s: &Vector2<f64>,
    v_s: &Vector2<f64>,
) -> (Matrix2<f64>, Matrix2<f64>) {
    let d = p_s - p_r;
    let c = d.x * v_s.y - d.y * v_s.x;
    let den = v_r.x * v_s.y - v_r.y * v_s.x;
    let grad_den_r = Vector2::new(v_s.y, -v_s.x);
    let grad_den_s = Vector2::new(-v_r.y, v_r.x);
    let grad_c_s = Vector2::new(-d.y, d.x);

    let jr = Matrix2::identity() * (c / den) - v_r * grad_den_r.transpose() * (c / (den * den));
    let js = v_r * (grad_c_s * den - grad_den_s * c).transpose() / (den * den);
    (jr, js)
}

fn keypoint_term(
    j: usize,
    field: &VectorField,
    mask: &SegMask,
    eligible: &[usize],
    target: &Vector2<f64>,
    pool: &PoolSpec,
    sf: &ScoringFunction,
    alpha: f64,
) -> Result<KeypointTerm> {
    let (w, h) = (field.width(), field.height());
    let mut stream = rng::stream(pool.seed, j as u64);
    let mut entries = Vec::with_capacity(pool.size);
    let mut hyps = Vec::with_capacity(pool.size);
    for _ in 0..pool.size {
        let (r, s) = sample_pair(&mut stream, eligible);
        let mut hyp = hypothesis_from_pixels(field, r, s);
        hyp.keypoint = j;
        hyps.push(prune_hypothesis(hyp, w, h));
        entries.push(PoolEntry { r, s });
    }

    let votes = field.data();
    let weights = mask.data();
    let kink = sf.kink();
    let mut hasher = DefaultHasher::new();

    for hyp in hyps.iter_mut() {
        hasher.write_u8(hyp.valid as u8);
        if hyp.valid {
            hyp.score = crate::voting::soft_score_unchecked(&hyp.position, field, mask, sf);
        }
    }

    let dist = hypothesis_distribution(hyps, alpha).map_err(|err| match err {
        KvnError::NoValidHypotheses { .. } => KvnError::no_hypotheses(format!("keypoint {j}")),
        other => other,
    })?;

    let sq_dist: Vec<f64> = dist
        .hypotheses
        .iter()
        .map(|hyp| {
            if hyp.valid {
                (hyp.position - target).norm_squared()
            } else {
                0.0
            }
        })
        .collect();
    let loss: f64 = dist.probabilities.iter().zip(&sq_dist).map(|(p, d)| p * d).sum();
    let grad_alpha: f64 = dist
        .hypotheses
        .iter()
        .zip(&dist.probabilities)
        .zip(&sq_dist)
        .filter(|((hyp, _), _)| hyp.valid)
        .map(|((hyp, p), d)| p * hyp.score * (d - loss))
        .sum();

    let mut grad_field = vec![Vector2::zeros(); votes.len()];
    let mut grad_mask = vec![0.0; votes.len()];

    for ((hyp, entry), (&prob, &d2)) in dist
        .hypotheses
        .iter()
        .zip(&entries)
        .zip(dist.probabilities.iter().zip(&sq_dist))
    {
        if !hyp.valid {
            continue;
        }
        // ∂l/∂S for this hypothesis through the softmax.
        let grad_score = alpha * prob * (d2 - loss);
        let mut grad_pos = (hyp.position - target) * (2.0 * prob);

        for (idx, (&m, v)) in weights.iter().zip(votes).enumerate() {
            if m == 0.0 {
                continue;
            }
            let nv = v.norm();
            if nv < ZERO_NORM {
                continue;
            }
            let dir = hyp.position - pixel_center(idx, w);
            let nd = dir.norm();
            if nd < ZERO_NORM {
                continue;
            }
            let (vh, dh) = (v / nv, dir / nd);
            let s = vh.dot(&dh).clamp(-1.0, 1.0);
            if let Some(t) = kink {
                hasher.write_u8((s >= t) as u8);
            }
            let f = sf.eval_unchecked(s);
            let df = sf.derivative(s);
            grad_mask[idx] += grad_score * f;
            let common = grad_score * m * df;
            grad_field[idx] += (dh - vh * s) * (common / nv);
            grad_pos += (vh - dh * s) * (common / nd);
        }

        let (p_r, p_s) = (pixel_center(entry.r, w), pixel_center(entry.s, w));
        let (jr, js) = intersection_jacobians(&p_r, &votes[entry.r], &p_s, &votes[entry.s]);
        grad_field[entry.r] += jr.transpose() * grad_pos;
        grad_field[entry.s] += js.transpose() * grad_pos;
    }

    Ok(KeypointTerm {
        loss,
        grad_field,
        grad_mask,
        grad_alpha,
        distribution: dist,
        signature: hasher.finish(),
    })
}

/// Expected squared keypoint error over the hypothesis distributions.
pub fn dsac_loss(
    fields: &[VectorField],
    mask: &SegMask,
    annotation: &GroundTruthAnnotation,
    pool: &PoolSpec,
    sf: &ScoringFunction,
    alpha: f64,
) -> Result<DsacLossResult> {
    if fields.len() != annotation.keypoints2d.len() {
        return Err(KvnError::shape(
            format!("{} keypoint fields", annotation.keypoints2d.len()),
            format!("{} fields", fields.len()),
        ));
    }
    for field in fields {
        check_shapes(field, mask)?;
    }
    check_mask_shapes(mask, &annotation.gt_mask)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(KvnError::DomainError {
            value: alpha,
            domain: "inverse temperature alpha > 0",
        });
    }
    let eligible = mask.eligible_pixels();
    if eligible.len() < 2 {
        return Err(KvnError::InsufficientSupport {
            eligible: eligible.len(),
            required: 2,
        });
    }

    let terms: Vec<Result<KeypointTerm>> = fields
        .par_iter()
        .zip(&annotation.keypoints2d)
        .enumerate()
        .map(|(j, (field, target))| keypoint_term(j, field, mask, &eligible, target, pool, sf, alpha))
        .collect();

    let (w, h) = (mask.width(), mask.height());
    let mut hasher = DefaultHasher::new();
    for idx in &eligible {
        hasher.write_usize(*idx);
    }
    let mut result = DsacLossResult {
        loss: 0.0,
        grad_fields: Vec::with_capacity(fields.len()),
        grad_mask: vec![0.0; w * h],
        grad_alpha: 0.0,
        distributions: Vec::with_capacity(fields.len()),
        signature: 0,
    };
    for term in terms {
        let term = term?;
        result.loss += term.loss;
        result.grad_alpha += term.grad_alpha;
        for (acc, g) in result.grad_mask.iter_mut().zip(&term.grad_mask) {
            *acc += g;
        }
        result.grad_fields.push(VectorField::new(w, h, term.grad_field)?);
        result.distributions.push(term.distribution);
        hasher.write_u64(term.signature);
    }
    result.signature = hasher.finish();
    Ok(result)
}

fn check_mask_shapes(a: &SegMask, b: &SegMask) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(KvnError::shape(
            format!("{}x{} raster", a.width(), a.height()),
            format!("{}x{} raster", b.width(), b.height()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Which pixels sit in the clamped region.
    pub signature: u64,
}

/// Mean binary cross-entropy between the predicted mask and the ground-truth mask.
pub fn mask_loss(mask: &SegMask, gt_mask: &SegMask) -> Result<MaskLoss> {
    check_mask_shapes(mask, gt_mask)?;
    let n = mask.data().len().max(1) as f64;
    let mut hasher = DefaultHasher::new();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(mask.data().len());
    for (&m, &g) in mask.data().iter().zip(gt_mask.data()) {
        let clamped = m.clamp(MASK_EPS, 1.0 - MASK_EPS);
        let inside = m > MASK_EPS && m < 1.0 - MASK_EPS;
        hasher.write_u8(inside as u8);
        loss -= g * clamped.ln() + (1.0 - g) * (1.0 - clamped).ln();
        grad.push(if inside {
            (clamped - g) / (clamped * (1.0 - clamped) * n)
        } else {
            0.0
        });
    }
    Ok(MaskLoss {
        loss: loss / n,
        grad,
        signature: hasher.finish(),
    })
}

/// `|H(P) − target|` and its sub-gradient with respect to `α`.
///
/// With `P = softmax(α·S)`, `dH/dα = −α·Var_P(S)`.
pub fn entropy_loss(dist: &HypothesisDistribution, target: f64) -> Result<(f64, f64)> {
    if dist.valid_count() == 0 {
        return Err(KvnError::no_hypotheses("entropy of an empty distribution"));
    }
    let gap = dist.entropy() - target;
    let dh_dalpha = -dist.alpha * dist.score_variance();
    let sign = if gap > 0.0 {
        1.0
    } else if gap < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok((gap.abs(), sign * dh_dalpha))
}

#[derive(Debug, Clone)]
pub struct KvnLossResult {
    pub loss: f64,
    pub mask_loss: f64,
    pub dsac_loss: f64,
    pub grad_fields: Vec<VectorField>,
    pub grad_mask: Vec<f64>,
    pub grad_alpha: f64,
    pub signature: u64,
}

/// Sum of the mask cross-entropy and the expected keypoint loss.
pub fn kvn_loss(
    fields: &[VectorField],
    mask: &SegMask,
    annotation: &GroundTruthAnnotation,
    pool: &PoolSpec,
    sf: &ScoringFunction,
    alpha: f64,
) -> Result<KvnLossResult> {
    let seg = mask_loss(mask, &annotation.gt_mask)?;
    let dsac = dsac_loss(fields, mask, annotation, pool, sf, alpha)?;
    let grad_mask = seg.grad.iter().zip(&dsac.grad_mask).map(|(a, b)| a + b).collect();
    let mut hasher = DefaultHasher::new();
    hasher.write_u64(seg.signature);
    hasher.write_u64(dsac.signature);
    Ok(KvnLossResult {
        loss: seg.loss + dsac.loss,
        mask_loss: seg.loss,
        dsac_loss: dsac.loss,
        grad_fields: dsac.grad_fields,
        grad_mask,
        grad_alpha: dsac.grad_alpha,
        signature: hasher.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voting::Hypothesis;
    use rand::Rng;

    fn exact_field(w: usize, h: usize, k: Vector2<f64>) -> VectorField {
        VectorField::from_fn(w, h, |x, y| {
            let d = k - Vector2::new(x as f64, y as f64);
            let n = d.norm();
            if n < ZERO_NORM {
                Vector2::zeros()
            } else {
                d / n
            }
        })
    }

    fn hyp(score: f64, x: f64) -> Hypothesis {
        Hypothesis {
            keypoint: 0,
            position: Vector2::new(x, 0.0),
            sources: [Vector2::zeros(); 2],
            valid: true,
            score,
        }
    }

    #[test]
    fn expectation_of_two_hypotheses() {
        // P = {0.5, 0.5}, squared distances {1, 3}.
        let dist = hypothesis_distribution(vec![hyp(1.0, 1.0), hyp(1.0, 3f64.sqrt())], 1.0).unwrap();
        let loss: f64 = dist
            .hypotheses
            .iter()
            .zip(&dist.probabilities)
            .map(|(h, p)| p * h.position.norm_squared())
            .sum();
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn intersection_jacobian_matches_differences() {
        let p_r = Vector2::new(1.0, 2.0);
        let p_s = Vector2::new(6.0, -1.0);
        let v_r = Vector2::new(0.8, 0.3);
        let v_s = Vector2::new(-0.4, 1.1);
        let h_of = |vr: Vector2<f64>, vs: Vector2<f64>| {
            let d = p_s - p_r;
            p_r + vr * ((d.x * vs.y - d.y * vs.x) / (vr.x * vs.y - vr.y * vs.x))
        };
        let (jr, js) = intersection_jacobians(&p_r, &v_r, &p_s, &v_s);
        let eps = 1e-6;
        for c in 0..2 {
            let mut e = Vector2::zeros();
            e[c] = eps;
            let fr = (h_of(v_r + e, v_s) - h_of(v_r - e, v_s)) / (2.0 * eps);
            let fs = (h_of(v_r, v_s + e) - h_of(v_r, v_s - e)) / (2.0 * eps);
            assert!((jr.column(c) - fr).amax() < 1e-6);
            assert!((js.column(c) - fs).amax() < 1e-6);
        }
    }

    #[test]
    fn exact_field_has_zero_loss() {
        let k = Vector2::new(5.3, 4.6);
        let field = exact_field(10, 10, k);
        let mask = SegMask::filled(10, 10, 1.0).unwrap();
        let ann = GroundTruthAnnotation {
            keypoints2d: vec![k],
            gt_mask: mask.clone(),
        };
        let out = dsac_loss(
            &[field],
            &mask,
            &ann,
            &PoolSpec { size: 16, seed: 3 },
            &ScoringFunction::default_soft(),
            1.0,
        )
        .unwrap();
        assert!(out.loss < 1e-18, "{}", out.loss);
        assert!(out.grad_fields[0].data().iter().all(|g| g.amax() < 1e-6));
    }

    #[test]
    fn single_valid_hypothesis_has_no_probability_gradient() {
        // Two eligible pixels give a single minimal set.
        let k = Vector2::new(2.0, 3.0);
        let mut field = exact_field(4, 4, k);
        field.data_mut()[0] = Vector2::new(1.0, 0.2);
        let mut m = vec![0.0; 16];
        m[0] = 1.0;
        m[3] = 1.0;
        m[5] = 0.3;
        let mask = SegMask::new(4, 4, m).unwrap();
        let ann = GroundTruthAnnotation {
            keypoints2d: vec![k],
            gt_mask: mask.clone(),
        };
        let out = dsac_loss(
            &[field],
            &mask,
            &ann,
            &PoolSpec { size: 1, seed: 0 },
            &ScoringFunction::default_soft(),
            2.0,
        )
        .unwrap();
        let h = out.distributions[0].hypotheses[0];
        assert!(h.valid);
        assert!((out.loss - (h.position - k).norm_squared()).abs() < 1e-12);
        assert!(out.grad_mask.iter().all(|&g| g == 0.0));
        assert_eq!(out.grad_alpha, 0.0);
        // Pixel 5 is a non-sampled voter: only the probability chain reaches it.
        assert_eq!(out.grad_fields[0].data()[5], Vector2::zeros());
    }

    #[test]
    fn no_valid_hypotheses_is_an_error() {
        let field = VectorField::from_fn(4, 4, |_, _| Vector2::new(1.0, 0.0));
        let mask = SegMask::filled(4, 4, 1.0).unwrap();
        let ann = GroundTruthAnnotation {
            keypoints2d: vec![Vector2::zeros()],
            gt_mask: mask.clone(),
        };
        let err = dsac_loss(
            &[field],
            &mask,
            &ann,
            &PoolSpec { size: 8, seed: 0 },
            &ScoringFunction::default_soft(),
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, KvnError::NoValidHypotheses { .. }));
    }

    #[test]
    fn mask_loss_closed_forms() {
        let gt = SegMask::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let perfect = mask_loss(&gt, &gt).unwrap();
        assert!(perfect.loss <= 1e-6);

        let half = SegMask::filled(2, 2, 0.5).unwrap();
        assert!((mask_loss(&half, &gt).unwrap().loss - 2f64.ln()).abs() < 1e-12);

        let wrong = SegMask::filled(1, 1, 1.0).unwrap();
        let zero = SegMask::filled(1, 1, 0.0).unwrap();
        let l = mask_loss(&wrong, &zero).unwrap().loss;
        assert!((l - (1.0 / MASK_EPS).ln()).abs() < 1e-6, "{l}");

        let other = SegMask::filled(3, 2, 0.5).unwrap();
        assert!(matches!(mask_loss(&other, &gt), Err(KvnError::ShapeError { .. })));
    }

    #[test]
    fn entropy_loss_examples() {
        let n = 403;
        let uniform = hypothesis_distribution((0..n).map(|_| hyp(1.0, 0.0)).collect(), 1.0).unwrap();
        let (l, _) = entropy_loss(&uniform, 6.0).unwrap();
        assert!(l < 0.003);
        assert!(((n as f64).ln() - uniform.entropy()).abs() < 1e-9);

        let single = hypothesis_distribution(vec![hyp(3.0, 0.0)], 1.0).unwrap();
        assert_eq!(entropy_loss(&single, 6.0).unwrap().0, 6.0);

        let two = hypothesis_distribution(vec![hyp(0.5, 0.0), hyp(0.5, 1.0)], 1.0).unwrap();
        assert!(entropy_loss(&two, 2f64.ln()).unwrap().0 < 1e-15);
    }

    #[test]
    fn entropy_decreases_with_alpha() {
        let mut rng = rng::stream(11, 0);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..10.0)).collect();
            let mut last = f64::INFINITY;
            for alpha in [0.01, 0.1, 0.5, 1.0, 2.0, 5.0] {
                let d = hypothesis_distribution(scores.iter().map(|&s| hyp(s, 0.0)).collect(), alpha).unwrap();
                let h = d.entropy();
                assert!(h < last);
                last = h;
            }
        }
    }

    #[test]
    fn kvn_loss_is_additive() {
        let k = Vector2::new(3.3, 2.2);
        let mut rng = rng::stream(5, 0);
        let field = VectorField::from_fn(8, 8, |x, y| {
            let d = k - Vector2::new(x as f64, y as f64);
            d + Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
        });
        let mask = SegMask::new(8, 8, (0..64).map(|i| if i % 3 == 0 { 0.2 } else { 0.8 }).collect()).unwrap();
        let gt = SegMask::new(8, 8, (0..64).map(|i| (i % 2) as f64).collect()).unwrap();
        let ann = GroundTruthAnnotation {
            keypoints2d: vec![k],
            gt_mask: gt.clone(),
        };
        let pool = PoolSpec { size: 8, seed: 1 };
        let sf = ScoringFunction::default_soft();
        let total = kvn_loss(&[field.clone()], &mask, &ann, &pool, &sf, 0.7).unwrap();
        let seg = mask_loss(&mask, &gt).unwrap();
        let dsac = dsac_loss(&[field], &mask, &ann, &pool, &sf, 0.7).unwrap();
        assert_eq!(total.loss, seg.loss + dsac.loss);
        for ((t, a), b) in total.grad_mask.iter().zip(&seg.grad).zip(&dsac.grad_mask) {
            assert_eq!(*t, a + b);
        }
    }
}
