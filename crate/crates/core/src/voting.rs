//! Keypoint voting: hypotheses from pairs of pixel votes, soft-inlier
//! scoring, softmax hypothesis distributions and classical RANSAC with
//! covariance extraction.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{KvnError, Result};
use crate::rng::KvnRng;

/// Vectors shorter than this are treated as missing votes.
pub const ZERO_NORM: f64 = 1e-12;
/// Tolerance on the normalized perp-dot product below which two votes are parallel.
pub const PARALLEL_EPS: f64 = 1e-6;
/// Mask value above which a pixel takes part in minimal-set sampling and hard counting.
pub const ELIGIBILITY_THRESHOLD: f64 = 0.5;
/// Hard-inlier cosine threshold used at inference.
pub const DEFAULT_INLIER_THRESHOLD: f64 = 0.99;
pub const DEFAULT_RANSAC_ROUNDS: usize = 256;
pub const DEFAULT_COVARIANCE_POOL: usize = 1024;

/// Per-pixel 2-vector raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    width: usize,
    height: usize,
    data: Vec<Vector2<f64>>,
}

impl VectorField {
    pub fn new(width: usize, height: usize, data: Vec<Vector2<f64>>) -> Result<Self> {
        if data.len() != width * height {
            return Err(KvnError::shape(
                format!("{} vectors for {width}x{height}", width * height),
                format!("{} vectors", data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Vector2::zeros(); width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Vector2<f64>) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Vector2<f64>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Vector2<f64>] {
        &mut self.data
    }

    pub fn at(&self, x: usize, y: usize) -> Vector2<f64> {
        self.data[y * self.width + x]
    }
}

/// Soft segmentation mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(KvnError::shape(
                format!("{} values for {width}x{height}", width * height),
                format!("{} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(KvnError::DomainError {
                value: *bad,
                domain: "mask values in [0, 1]",
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for callers that keep values inside `[0, 1]`.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Raster indices of pixels taking part in sampling (`M(p) > 0.5`).
    pub fn eligible_pixels(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > ELIGIBILITY_THRESHOLD)
            .map(|(i, _)| i)
            .collect()
    }
}

pub(crate) fn check_shapes(field: &VectorField, mask: &SegMask) -> Result<()> {
    if field.width != mask.width || field.height != mask.height {
        return Err(KvnError::shape(
            format!("mask {}x{}", field.width, field.height),
            format!("mask {}x{}", mask.width, mask.height),
        ));
    }
    Ok(())
}

/// Pixel center of raster index `idx`.
pub fn pixel_center(idx: usize, width: usize) -> Vector2<f64> {
    Vector2::new((idx % width) as f64, (idx / width) as f64)
}

/// Maps a cosine similarity in `[-1, 1]` to a soft-inlier value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoringFunction {
    /// Leaky-ReLU-like ramp through `(−1, 0)`, `(t, v)` and `(1, 1)`.
    PiecewiseLinear { t: f64, v: f64 },
    /// `sig(β (s − τ))`.
    Sigmoid { beta: f64, tau: f64 },
    /// Hard inlier test `s ≥ t`.
    Heaviside { t: f64 },
}

impl ScoringFunction {
    pub fn piecewise_linear(t: f64, v: f64) -> Result<Self> {
        if !(t > -1.0 && t < 1.0) {
            return Err(KvnError::DomainError {
                value: t,
                domain: "piecewise-linear threshold t in (-1, 1)",
            });
        }
        if !(v > 0.0 && v < 1.0) {
            return Err(KvnError::DomainError {
                value: v,
                domain: "piecewise-linear soft-inlier value v in (0, 1)",
            });
        }
        Ok(ScoringFunction::PiecewiseLinear { t, v })
    }

    pub fn sigmoid(beta: f64, tau: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(KvnError::DomainError {
                value: beta,
                domain: "sigmoid slope beta > 0",
            });
        }
        if !(-1.0..=1.0).contains(&tau) {
            return Err(KvnError::DomainError {
                value: tau,
                domain: "sigmoid center tau in [-1, 1]",
            });
        }
        Ok(ScoringFunction::Sigmoid { beta, tau })
    }

    pub fn heaviside(t: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&t) {
            return Err(KvnError::DomainError {
                value: t,
                domain: "heaviside threshold in [-1, 1]",
            });
        }
        Ok(ScoringFunction::Heaviside { t })
    }

    /// The default soft scoring function, `f(·; t = 0.9, v = 0.1)`.
    pub fn default_soft() -> Self {
        ScoringFunction::PiecewiseLinear { t: 0.9, v: 0.1 }
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        if !(-1.0..=1.0).contains(&s) {
            return Err(KvnError::DomainError {
                value: s,
                domain: "cosine similarity in [-1, 1]",
            });
        }
        Ok(self.eval_unchecked(s))
    }

    pub(crate) fn eval_unchecked(&self, s: f64) -> f64 {
        match *self {
            // Written so that f(t) = v, f(1) = 1 and f(-1) = 0 hold exactly in floating point.
            ScoringFunction::PiecewiseLinear { t, v } => {
                if s >= t {
                    v + (1.0 - v) * ((s - t) / (1.0 - t))
                } else {
                    v * ((s + 1.0) / (t + 1.0))
                }
            }
            ScoringFunction::Sigmoid { beta, tau } => sigmoid(beta * (s - tau)),
            ScoringFunction::Heaviside { t } => {
                if s >= t {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative (sub-gradient) with respect to `s`. At the piecewise-linear
    /// kink `s = t` the slope of the `s ≥ t` branch is returned.
    pub fn derivative(&self, s: f64) -> f64 {
        match *self {
            ScoringFunction::PiecewiseLinear { t, v } => {
                if s >= t {
                    (1.0 - v) / (1.0 - t)
                } else {
                    v / (t + 1.0)
                }
            }
            ScoringFunction::Sigmoid { beta, tau } => {
                let g = sigmoid(beta * (s - tau));
                beta * g * (1.0 - g)
            }
            ScoringFunction::Heaviside { .. } => 0.0,
        }
    }

    /// Location of the non-differentiable point, if any.
    pub fn kink(&self) -> Option<f64> {
        match *self {
            ScoringFunction::PiecewiseLinear { t, .. } | ScoringFunction::Heaviside { t } => Some(t),
            ScoringFunction::Sigmoid { .. } => None,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn score_similarity(s: f64, sf: &ScoringFunction) -> Result<f64> {
    sf.eval(s)
}

/// 2D cross product `u_x w_y − u_y w_x`.
pub fn perp_dot(u: &Vector2<f64>, w: &Vector2<f64>) -> f64 {
    u.x * w.y - u.y * w.x
}

/// A keypoint candidate from the intersection of two pixel votes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis {
    pub keypoint: usize,
    pub position: Vector2<f64>,
    /// Pixels `p_r` and `p_s` that cast the two votes.
    pub sources: [Vector2<f64>; 2],
    pub valid: bool,
    pub score: f64,
}

impl Hypothesis {
    fn invalid(p_r: Vector2<f64>, p_s: Vector2<f64>) -> Self {
        Self {
            keypoint: 0,
            position: Vector2::new(f64::NAN, f64::NAN),
            sources: [p_r, p_s],
            valid: false,
            score: 0.0,
        }
    }
}

/// Intersects the lines `p_r + a·v_r` and `p_s + b·v_s`.
///
/// Votes are normalized internally; zero-length votes and pairs whose
/// normalized perp-dot product is at most `parallel_eps` give an invalid hypothesis.
pub fn generate_hypothesis(
    p_r: Vector2<f64>,
    v_r: Vector2<f64>,
    p_s: Vector2<f64>,
    v_s: Vector2<f64>,
    parallel_eps: f64,
) -> Hypothesis {
    let (nr, ns) = (v_r.norm(), v_s.norm());
    if nr < ZERO_NORM || ns < ZERO_NORM {
        return Hypothesis::invalid(p_r, p_s);
    }
    let (u_r, u_s) = (v_r / nr, v_s / ns);
    let denom = perp_dot(&u_r, &u_s);
    if denom.abs() <= parallel_eps {
        return Hypothesis::invalid(p_r, p_s);
    }
    let a = perp_dot(&(p_s - p_r), &u_s) / denom;
    Hypothesis {
        keypoint: 0,
        position: p_r + u_r * a,
        sources: [p_r, p_s],
        valid: true,
        score: 0.0,
    }
}

/// Invalidates hypotheses lying farther outside the image than one image dimension.
pub fn prune_hypothesis(h: Hypothesis, width: usize, height: usize) -> Hypothesis {
    let (w, hh) = (width as f64, height as f64);
    let x_ok = h.position.x >= -w && h.position.x <= 2.0 * w;
    let y_ok = h.position.y >= -hh && h.position.y <= 2.0 * hh;
    if h.valid && !(x_ok && y_ok) {
        Hypothesis { valid: false, ..h }
    } else {
        h
    }
}

/// Cosine similarity between `vote` and the direction `target − pixel`,
/// or `None` when either vector is degenerate.
pub(crate) fn vote_cosine(vote: &Vector2<f64>, pixel: &Vector2<f64>, target: &Vector2<f64>) -> Option<f64> {
    let n = vote.norm();
    if n < ZERO_NORM {
        return None;
    }
    let d = target - pixel;
    let dn = d.norm();
    if dn < ZERO_NORM {
        return None;
    }
    Some((vote.dot(&d) / (n * dn)).clamp(-1.0, 1.0))
}

/// Mask-weighted sum of soft-inlier values of every pixel's vote for `h`.
pub fn soft_inlier_score(h: &Hypothesis, field: &VectorField, mask: &SegMask, sf: &ScoringFunction) -> Result<f64> {
    check_shapes(field, mask)?;
    if !h.valid {
        return Err(KvnError::invalid("cannot score an invalid hypothesis"));
    }
    Ok(soft_score_unchecked(&h.position, field, mask, sf))
}

pub(crate) fn soft_score_unchecked(h: &Vector2<f64>, field: &VectorField, mask: &SegMask, sf: &ScoringFunction) -> f64 {
    let mut total = 0.0;
    for (idx, (&m, v)) in mask.data.iter().zip(&field.data).enumerate() {
        if m == 0.0 {
            continue;
        }
        if let Some(s) = vote_cosine(v, &pixel_center(idx, field.width), h) {
            total += m * sf.eval_unchecked(s);
        }
    }
    total
}

/// Number of eligible pixels whose vote agrees with `h` at cosine `≥ threshold`.
pub fn count_inliers(h: &Vector2<f64>, field: &VectorField, mask: &SegMask, threshold: f64) -> usize {
    mask.data
        .iter()
        .zip(&field.data)
        .enumerate()
        .filter(|(idx, (&m, v))| {
            m > ELIGIBILITY_THRESHOLD
                && vote_cosine(v, &pixel_center(*idx, field.width), h).is_some_and(|s| s >= threshold)
        })
        .count()
}

/// Softmax distribution `P(h) ∝ exp(α·S(h))` over the valid hypotheses of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisDistribution {
    pub hypotheses: Vec<Hypothesis>,
    /// One entry per hypothesis; exactly 0 for invalid ones.
    pub probabilities: Vec<f64>,
    pub alpha: f64,
}

impl HypothesisDistribution {
    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Probability-weighted mean score `Σ P·S`.
    pub fn mean_score(&self) -> f64 {
        self.hypotheses
            .iter()
            .zip(&self.probabilities)
            .filter(|(h, _)| h.valid)
            .map(|(h, p)| p * h.score)
            .sum()
    }

    /// Probability-weighted variance of the scores.
    pub fn score_variance(&self) -> f64 {
        let mean = self.mean_score();
        self.hypotheses
            .iter()
            .zip(&self.probabilities)
            .filter(|(h, _)| h.valid)
            .map(|(h, p)| p * (h.score - mean).powi(2))
            .sum()
    }

    pub fn valid_count(&self) -> usize {
        self.hypotheses.iter().filter(|h| h.valid).count()
    }
}

pub fn hypothesis_distribution(pool: Vec<Hypothesis>, alpha: f64) -> Result<HypothesisDistribution> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(KvnError::DomainError {
            value: alpha,
            domain: "inverse temperature alpha > 0",
        });
    }
    let max = pool
        .iter()
        .filter(|h| h.valid)
        .map(|h| alpha * h.score)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(KvnError::no_hypotheses("softmax over an empty pool"));
    }
    let mut probabilities: Vec<f64> = pool
        .iter()
        .map(|h| if h.valid { (alpha * h.score - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = probabilities.iter().sum();
    probabilities.iter_mut().for_each(|p| *p /= z);
    Ok(HypothesisDistribution {
        hypotheses: pool,
        probabilities,
        alpha,
    })
}

/// Draws two distinct entries of `eligible`, uniformly and with replacement
/// across calls.
pub(crate) fn sample_pair(rng: &mut KvnRng, eligible: &[usize]) -> (usize, usize) {
    debug_assert!(eligible.len() >= 2);
    let r = eligible[rng.random_range(0..eligible.len())];
    loop {
        let s = eligible[rng.random_range(0..eligible.len())];
        if s != r {
            return (r, s);
        }
    }
}

pub(crate) fn hypothesis_from_pixels(field: &VectorField, r: usize, s: usize) -> Hypothesis {
    let w = field.width;
    generate_hypothesis(
        pixel_center(r, w),
        field.data[r],
        pixel_center(s, w),
        field.data[s],
        PARALLEL_EPS,
    )
}

fn eligible_or_err(mask: &SegMask) -> Result<Vec<usize>> {
    let eligible = mask.eligible_pixels();
    if eligible.len() < 2 {
        return Err(KvnError::InsufficientSupport {
            eligible: eligible.len(),
            required: 2,
        });
    }
    Ok(eligible)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacEstimate {
    pub position: Vector2<f64>,
    pub inliers: usize,
}

/// Classical RANSAC over `rounds` sampled pixel pairs, returning the
/// hypothesis with the largest hard-inlier count (earliest on ties).
pub fn ransac_keypoint(
    field: &VectorField,
    mask: &SegMask,
    rounds: usize,
    threshold: f64,
    rng: &mut KvnRng,
) -> Result<RansacEstimate> {
    check_shapes(field, mask)?;
    let eligible = eligible_or_err(mask)?;
    let candidates: Vec<Vector2<f64>> = (0..rounds)
        .map(|_| {
            let (r, s) = sample_pair(rng, &eligible);
            hypothesis_from_pixels(field, r, s)
        })
        .filter(|h| h.valid)
        .map(|h| h.position)
        .collect();
    let counts: Vec<usize> = candidates
        .par_iter()
        .map(|h| count_inliers(h, field, mask, threshold))
        .collect();
    let mut best: Option<RansacEstimate> = None;
    for (position, inliers) in candidates.into_iter().zip(counts) {
        if best.is_none_or(|b| inliers > b.inliers) {
            best = Some(RansacEstimate { position, inliers });
        }
    }
    best.ok_or_else(|| KvnError::no_hypotheses(format!("{rounds} RANSAC rounds")))
}

/// A 2D keypoint location with its 2×2 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointEstimate {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
}

impl KeypointEstimate {
    pub fn new(mean: Vector2<f64>, covariance: Matrix2<f64>) -> Result<Self> {
        if (covariance - covariance.transpose()).amax() > 1e-9 * covariance.amax().max(1.0) {
            return Err(KvnError::invalid("keypoint covariance must be symmetric"));
        }
        let sym = (covariance + covariance.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        if min_eig < -1e-9 {
            return Err(KvnError::invalid(format!(
                "keypoint covariance must be positive semi-definite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self { mean, covariance: sym })
    }

    pub fn isotropic(mean: Vector2<f64>, variance: f64) -> Self {
        Self {
            mean,
            covariance: Matrix2::identity() * variance,
        }
    }
}

/// Weighted mean and second central moment. Falls back to uniform weights
/// when every weight is zero; `None` for an empty sample.
pub fn weighted_covariance(samples: &[(Vector2<f64>, f64)]) -> Option<(Vector2<f64>, Matrix2<f64>)> {
    if samples.is_empty() {
        return None;
    }
    let total: f64 = samples.iter().map(|(_, w)| w).sum();
    let uniform = total <= 0.0;
    let weight = |w: f64| if uniform { 1.0 } else { w };
    let norm = if uniform { samples.len() as f64 } else { total };

    let mean = samples
        .iter()
        .fold(Vector2::zeros(), |acc, (h, w)| acc + h * weight(*w))
        / norm;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (h, w) in samples {
        let d = h - mean;
        let w = weight(*w);
        sxx += w * d.x * d.x;
        sxy += w * d.x * d.y;
        syy += w * d.y * d.y;
    }
    Some((mean, Matrix2::new(sxx, sxy, sxy, syy) / norm))
}

/// Covariance of a fresh pool of `pool_size` valid RANSAC hypotheses, each
/// weighted by its hard-inlier count, about their weighted mean. The
/// returned mean is `best`.
pub fn keypoint_covariance(
    best: &Vector2<f64>,
    field: &VectorField,
    mask: &SegMask,
    pool_size: usize,
    threshold: f64,
    rng: &mut KvnRng,
) -> Result<KeypointEstimate> {
    check_shapes(field, mask)?;
    let eligible = eligible_or_err(mask)?;
    // Fields with many zero or parallel votes may never fill the pool.
    let max_draws = pool_size.saturating_mul(16).max(64);
    let mut pool = Vec::with_capacity(pool_size);
    for _ in 0..max_draws {
        if pool.len() == pool_size {
            break;
        }
        let (r, s) = sample_pair(rng, &eligible);
        let h = hypothesis_from_pixels(field, r, s);
        if h.valid {
            pool.push(h.position);
        }
    }
    let weighted: Vec<(Vector2<f64>, f64)> = pool
        .par_iter()
        .map(|h| (*h, count_inliers(h, field, mask, threshold) as f64))
        .collect();
    let (_, covariance) = weighted_covariance(&weighted).ok_or_else(|| KvnError::no_hypotheses("covariance pool"))?;
    Ok(KeypointEstimate {
        mean: *best,
        covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn pl() -> ScoringFunction {
        ScoringFunction::piecewise_linear(0.9, 0.1).unwrap()
    }

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

    #[test]
    fn piecewise_linear_closed_form() {
        let f = pl();
        assert_eq!(f.eval(1.0).unwrap(), 1.0);
        assert_eq!(f.eval(0.9).unwrap(), 0.1);
        assert_eq!(f.eval(-1.0).unwrap(), 0.0);
        assert!((f.eval(0.0).unwrap() - 0.1 / 1.9).abs() < 1e-15);
    }

    #[test]
    fn scoring_domain_checks() {
        assert!(matches!(pl().eval(1.0 + 1e-9), Err(KvnError::DomainError { .. })));
        assert!(matches!(pl().eval(-1.5), Err(KvnError::DomainError { .. })));
        assert!(ScoringFunction::piecewise_linear(1.0, 0.1).is_err());
        assert!(ScoringFunction::piecewise_linear(0.9, 0.0).is_err());
        assert!(ScoringFunction::sigmoid(0.0, 0.5).is_err());
        assert!(ScoringFunction::sigmoid(1.0, 1.5).is_err());
    }

    #[test]
    fn sigmoid_and_heaviside() {
        let s = ScoringFunction::sigmoid(100.0, 0.99).unwrap();
        assert_eq!(s.eval(0.99).unwrap(), 0.5);
        let h = ScoringFunction::heaviside(0.99).unwrap();
        assert_eq!(h.eval(0.99).unwrap(), 1.0);
        assert_eq!(h.eval(0.98).unwrap(), 0.0);
        // Large negative arguments must not overflow.
        assert!(s.eval(-1.0).unwrap() >= 0.0);
    }

    #[test]
    fn perp_dot_examples() {
        assert_eq!(perp_dot(&Vector2::new(1.0, 0.0), &Vector2::new(0.0, 1.0)), 1.0);
        assert_eq!(perp_dot(&Vector2::new(1.0, 0.0), &Vector2::new(1.0, 0.0)), 0.0);
        assert_eq!(perp_dot(&Vector2::new(2.0, 3.0), &Vector2::new(4.0, 5.0)), -2.0);
    }

    #[test]
    fn hypothesis_examples() {
        let h = generate_hypothesis(
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(2.0, 2.0),
            Vector2::new(0.0, -1.0),
            PARALLEL_EPS,
        );
        assert!(h.valid);
        assert!((h.position - Vector2::new(2.0, 0.0)).norm() < 1e-12);

        let parallel = generate_hypothesis(
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 2.0),
            Vector2::new(1.0, 0.0),
            PARALLEL_EPS,
        );
        assert!(!parallel.valid);

        let origin = generate_hypothesis(
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 2.0),
            Vector2::new(0.0, -1.0),
            PARALLEL_EPS,
        );
        assert!(origin.valid);
        assert!(origin.position.norm() < 1e-12);
    }

    #[test]
    fn zero_votes_make_invalid_hypotheses() {
        let h = generate_hypothesis(
            Vector2::zeros(),
            Vector2::zeros(),
            Vector2::new(1.0, 1.0),
            Vector2::new(0.0, 1.0),
            PARALLEL_EPS,
        );
        assert!(!h.valid);
    }

    #[test]
    fn unnormalized_votes_give_same_intersection() {
        let a = generate_hypothesis(
            Vector2::new(1.0, 2.0),
            Vector2::new(3.0, 1.0),
            Vector2::new(5.0, -1.0),
            Vector2::new(-1.0, 2.0),
            PARALLEL_EPS,
        );
        let b = generate_hypothesis(
            Vector2::new(1.0, 2.0),
            Vector2::new(30.0, 10.0),
            Vector2::new(5.0, -1.0),
            Vector2::new(-0.01, 0.02),
            PARALLEL_EPS,
        );
        assert!((a.position - b.position).norm() < 1e-12);
    }

    #[test]
    fn pruning_margin() {
        let (w, h) = (64usize, 48usize);
        let mk = |x: f64, y: f64| Hypothesis {
            keypoint: 0,
            position: Vector2::new(x, y),
            sources: [Vector2::zeros(); 2],
            valid: true,
            score: 0.0,
        };
        assert!(prune_hypothesis(mk(32.0, 24.0), w, h).valid);
        assert!(!prune_hypothesis(mk(-2.5 * 64.0, 0.0), w, h).valid);
        assert!(prune_hypothesis(mk(128.0, 48.0), w, h).valid);
        assert!(prune_hypothesis(mk(-64.0, -48.0), w, h).valid);
        assert!(!prune_hypothesis(mk(0.0, 96.0 + 1e-9), w, h).valid);
    }

    fn valid_at(x: f64, y: f64) -> Hypothesis {
        Hypothesis {
            keypoint: 0,
            position: Vector2::new(x, y),
            sources: [Vector2::zeros(); 2],
            valid: true,
            score: 0.0,
        }
    }

    #[test]
    fn soft_score_examples() {
        let field = exact_field(4, 4, Vector2::new(1.5, 1.5));
        let empty = SegMask::filled(4, 4, 0.0).unwrap();
        let h = valid_at(1.5, 1.5);
        assert_eq!(soft_inlier_score(&h, &field, &empty, &pl()).unwrap(), 0.0);

        let mut single = vec![0.0; 16];
        single[0] = 1.0;
        let single = SegMask::new(4, 4, single).unwrap();
        assert!((soft_inlier_score(&h, &field, &single, &pl()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_score_three_pixels() {
        // Hypothesis at the origin; three pixels on the x axis with votes at
        // cosines 1, 0.9 and 0 relative to the direction towards it.
        let target = Vector2::new(0.0, 0.0);
        let mut data = vec![Vector2::zeros(); 4 * 1];
        let angle = (0.9f64).acos();
        data[1] = Vector2::new(-1.0, 0.0);
        data[2] = Vector2::new(-angle.cos(), angle.sin());
        data[3] = Vector2::new(0.0, 1.0);
        let field = VectorField::new(4, 1, data).unwrap();
        let mask = SegMask::new(4, 1, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let h = valid_at(target.x, target.y);
        let s = soft_inlier_score(&h, &field, &mask, &pl()).unwrap();
        assert!((s - (1.0 + 0.1 + 0.1 / 1.9)).abs() < 1e-12, "{s}");
    }

    #[test]
    fn soft_score_shape_mismatch() {
        let field = VectorField::zeros(4, 4);
        let mask = SegMask::filled(4, 3, 1.0).unwrap();
        let err = soft_inlier_score(&valid_at(0.0, 0.0), &field, &mask, &pl()).unwrap_err();
        assert!(matches!(err, KvnError::ShapeError { .. }));
    }

    #[test]
    fn pixel_on_hypothesis_contributes_zero() {
        let field = VectorField::new(1, 1, vec![Vector2::new(1.0, 0.0)]).unwrap();
        let mask = SegMask::filled(1, 1, 1.0).unwrap();
        assert_eq!(
            soft_inlier_score(&valid_at(0.0, 0.0), &field, &mask, &pl()).unwrap(),
            0.0
        );
    }

    fn scored(scores: &[(f64, bool)]) -> Vec<Hypothesis> {
        scores
            .iter()
            .map(|&(score, valid)| Hypothesis {
                score,
                valid,
                ..valid_at(0.0, 0.0)
            })
            .collect()
    }

    #[test]
    fn distribution_examples() {
        let d = hypothesis_distribution(scored(&[(2.0, true); 3]), 1.0).unwrap();
        for p in &d.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let d = hypothesis_distribution(scored(&[(0.0, true), (3f64.ln(), true)]), 1.0).unwrap();
        assert!((d.probabilities[0] - 0.25).abs() < 1e-15);
        assert!((d.probabilities[1] - 0.75).abs() < 1e-15);

        let d = hypothesis_distribution(scored(&[(1.0, true), (1.0, true), (9.0, false)]), 1.0).unwrap();
        assert_eq!(d.probabilities, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn distribution_errors_and_overflow() {
        let err = hypothesis_distribution(scored(&[(1.0, false)]), 1.0).unwrap_err();
        assert!(matches!(err, KvnError::NoValidHypotheses { .. }));
        assert!(hypothesis_distribution(scored(&[(1.0, true)]), 0.0).is_err());

        let d = hypothesis_distribution(scored(&[(1e6, true), (1e6 - 1.0, true)]), 10.0).unwrap();
        assert!(d.probabilities.iter().all(|p| p.is_finite()));
        assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_covariance_examples() {
        let (mu, cov) = weighted_covariance(&[(Vector2::new(0.0, 0.0), 1.0), (Vector2::new(2.0, 0.0), 1.0)]).unwrap();
        assert_eq!(mu, Vector2::new(1.0, 0.0));
        assert_eq!(cov, Matrix2::new(1.0, 0.0, 0.0, 0.0));

        let same = vec![(Vector2::new(3.0, -1.0), 5.0); 10];
        let (_, cov) = weighted_covariance(&same).unwrap();
        assert_eq!(cov, Matrix2::zeros());

        assert!(weighted_covariance(&[]).is_none());
    }

    #[test]
    fn ransac_recovers_exact_keypoint() {
        let k = Vector2::new(20.3, 11.7);
        let field = exact_field(32, 24, k);
        let mask = SegMask::filled(32, 24, 1.0).unwrap();
        let mut rng = rng::stream(7, 0);
        let est = ransac_keypoint(&field, &mask, 64, DEFAULT_INLIER_THRESHOLD, &mut rng).unwrap();
        assert!((est.position - k).norm() < 0.5);
        // Every pixel agrees with the exact keypoint.
        assert_eq!(est.inliers, 32 * 24);
    }

    #[test]
    fn ransac_is_seed_deterministic() {
        let field = VectorField::from_fn(16, 16, |x, y| {
            Vector2::new((x * 7 % 5) as f64 - 2.0, (y * 3 % 7) as f64 - 3.0)
        });
        let mask = SegMask::filled(16, 16, 1.0).unwrap();
        let a = ransac_keypoint(&field, &mask, 32, 0.9, &mut rng::stream(3, 1)).unwrap();
        let b = ransac_keypoint(&field, &mask, 32, 0.9, &mut rng::stream(3, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ransac_insufficient_support() {
        let field = exact_field(4, 4, Vector2::new(1.0, 1.0));
        let mut data = vec![0.0; 16];
        data[5] = 1.0;
        let mask = SegMask::new(4, 4, data).unwrap();
        let err = ransac_keypoint(&field, &mask, 16, 0.99, &mut rng::stream(0, 0)).unwrap_err();
        assert!(matches!(err, KvnError::InsufficientSupport { eligible: 1, .. }));
    }

    #[test]
    fn covariance_small_for_exact_field() {
        let k = Vector2::new(10.4, 9.1);
        let field = exact_field(24, 24, k);
        let mask = SegMask::filled(24, 24, 1.0).unwrap();
        let est = keypoint_covariance(&k, &field, &mask, 256, 0.99, &mut rng::stream(1, 2)).unwrap();
        assert!(est.covariance.trace() < 1.0);
        assert_eq!(est.mean, k);
    }

    #[test]
    fn covariance_fails_without_valid_hypotheses() {
        let field = VectorField::zeros(4, 4);
        let mask = SegMask::filled(4, 4, 1.0).unwrap();
        let err = keypoint_covariance(&Vector2::zeros(), &field, &mask, 8, 0.99, &mut rng::stream(1, 1)).unwrap_err();
        assert!(matches!(err, KvnError::NoValidHypotheses { .. }));
    }

    fn random_field(seed: u64, w: usize, h: usize) -> (VectorField, SegMask) {
        use rand::Rng;
        let mut rng = rng::stream(seed, 99);
        let field = VectorField::from_fn(w, h, |_, _| {
            Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let mask = SegMask::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        (field, mask)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hypothesis_lies_on_both_lines(
            pr in (-50.0..50.0f64, -50.0..50.0f64),
            ps in (-50.0..50.0f64, -50.0..50.0f64),
            ar in 0.0..std::f64::consts::TAU,
            as_ in 0.0..std::f64::consts::TAU,
        ) {
            let p_r = Vector2::new(pr.0, pr.1);
            let p_s = Vector2::new(ps.0, ps.1);
            let v_r = Vector2::new(ar.cos(), ar.sin());
            let v_s = Vector2::new(as_.cos(), as_.sin());
            prop_assume!(perp_dot(&v_r, &v_s).abs() > 1e-3);
            let h = generate_hypothesis(p_r, v_r, p_s, v_s, PARALLEL_EPS);
            prop_assert!(h.valid);
            // Distance from h to each line.
            prop_assert!(perp_dot(&(h.position - p_r), &v_r).abs() < 1e-6);
            prop_assert!(perp_dot(&(h.position - p_s), &v_s).abs() < 1e-6);
        }

        #[test]
        fn piecewise_linear_monotone_and_continuous(t in -0.95..0.95f64, v in 0.01..0.99f64, a in -1.0..1.0f64, b in -1.0..1.0f64) {
            let f = ScoringFunction::piecewise_linear(t, v).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(f.eval(lo).unwrap() <= f.eval(hi).unwrap() + 1e-15);
            let left = f.eval(t - 1e-13).unwrap();
            prop_assert!((left - v).abs() < 1e-10);
            prop_assert_eq!(f.eval(t).unwrap(), v);
        }

        #[test]
        fn softmax_shift_invariance(scores in proptest::collection::vec(-20.0..20.0f64, 1..30), shift in -100.0..100.0f64, alpha in 0.01..5.0f64) {
            let pool = scored(&scores.iter().map(|&s| (s, true)).collect::<Vec<_>>());
            let shifted = scored(&scores.iter().map(|&s| (s + shift, true)).collect::<Vec<_>>());
            let a = hypothesis_distribution(pool, alpha).unwrap();
            let b = hypothesis_distribution(shifted, alpha).unwrap();
            prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (p, q) in a.probabilities.iter().zip(&b.probabilities) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn heaviside_score_equals_hard_count(seed in 0u64..1000, hx in -5.0..20.0f64, hy in -5.0..20.0f64) {
            let (field, mask) = random_field(seed, 12, 10);
            let binary = SegMask::new(12, 10, mask.data().iter().map(|&m| if m > 0.5 { 1.0 } else { 0.0 }).collect()).unwrap();
            let h = valid_at(hx, hy);
            let sf = ScoringFunction::heaviside(0.8).unwrap();
            let soft = soft_inlier_score(&h, &field, &binary, &sf).unwrap();
            prop_assert_eq!(soft, count_inliers(&h.position, &field, &binary, 0.8) as f64);
        }

        #[test]
        fn covariance_symmetric_psd(seed in 0u64..10_000) {
            let (field, mask) = random_field(seed, 8, 8);
            let est = keypoint_covariance(&Vector2::zeros(), &field, &mask, 64, 0.9, &mut rng::stream(seed, 5)).unwrap();
            let c = est.covariance;
            prop_assert!((c - c.transpose()).amax() < 1e-12);
            prop_assert!(c.symmetric_eigenvalues().min() >= -1e-9);
        }
    }
}
