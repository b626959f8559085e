//! Synthetic scenes with exact voting targets.
//!
//! Stands in for a trained network: given a known object pose, it renders
//! the ideal per-keypoint unit-vector fields and a convex-hull mask in every
//! camera of a rig, then optionally corrupts them in a seeded, reproducible way.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::dsac::GroundTruthAnnotation;
use crate::error::{KvnError, Result};
use crate::geometry::{orthogonalize, CameraIntrinsics, KeypointSet3D, Pose, StereoRig};
use crate::rng::{self, stream_id};
use crate::voting::{SegMask, VectorField, ZERO_NORM};

const PURPOSE_NOISE: u64 = 1;
const PURPOSE_OUTLIERS: u64 = 2;
const PURPOSE_FLIP: u64 = 3;
/// Keypoint slot used for per-camera (not per-keypoint) streams.
const CAMERA_SLOT: usize = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Standard deviation of the per-vector rotation, radians.
    pub angular_noise_sigma: f64,
    /// Fraction of mask pixels whose votes are replaced by random directions.
    pub outlier_fraction: f64,
    /// Fraction of raster pixels whose mask value is flipped.
    pub mask_flip_fraction: f64,
    pub rng_seed: u64,
}

impl CorruptionSpec {
    pub fn new(
        angular_noise_sigma: f64,
        outlier_fraction: f64,
        mask_flip_fraction: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if !(angular_noise_sigma >= 0.0) || !angular_noise_sigma.is_finite() {
            return Err(KvnError::DomainError {
                value: angular_noise_sigma,
                domain: "angular noise sigma >= 0",
            });
        }
        for (value, domain) in [
            (outlier_fraction, "outlier fraction in [0, 1)"),
            (mask_flip_fraction, "mask flip fraction in [0, 1)"),
        ] {
            if !(0.0..1.0).contains(&value) {
                return Err(KvnError::DomainError { value, domain });
            }
        }
        Ok(Self {
            angular_noise_sigma,
            outlier_fraction,
            mask_flip_fraction,
            rng_seed,
        })
    }

    pub fn none() -> Self {
        Self {
            angular_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            mask_flip_fraction: 0.0,
            rng_seed: 0,
        }
    }

    pub fn is_none(&self) -> bool {
        self.angular_noise_sigma == 0.0 && self.outlier_fraction == 0.0 && self.mask_flip_fraction == 0.0
    }
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub rig: StereoRig,
    pub model_points: Vec<Vector3<f64>>,
    pub n_keypoints: usize,
    pub gt_pose: Pose,
    pub corruption: CorruptionSpec,
    keypoints: KeypointSet3D,
}

impl SceneSpec {
    /// Selects the keypoints by farthest point sampling from model point 0
    /// and checks that all of them are in front of every camera.
    pub fn new(
        rig: StereoRig,
        model_points: Vec<Vector3<f64>>,
        n_keypoints: usize,
        gt_pose: Pose,
        corruption: CorruptionSpec,
    ) -> Result<Self> {
        if n_keypoints == 0 {
            return Err(KvnError::invalid("a scene needs at least one keypoint"));
        }
        let keypoints = farthest_point_sampling(&model_points, n_keypoints, 0)?;
        Self::with_keypoints(rig, model_points, keypoints, gt_pose, corruption)
    }

    /// Uses explicitly given keypoints instead of sampling them.
    pub fn with_keypoints(
        rig: StereoRig,
        model_points: Vec<Vector3<f64>>,
        keypoints: KeypointSet3D,
        gt_pose: Pose,
        corruption: CorruptionSpec,
    ) -> Result<Self> {
        if model_points.len() < keypoints.len() {
            return Err(KvnError::InsufficientPoints {
                requested: keypoints.len(),
                available: model_points.len(),
            });
        }
        if model_points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(KvnError::invalid("model points must be finite"));
        }
        for i in 0..rig.len() {
            for p in keypoints.points() {
                rig.project(i, &gt_pose, p)?;
            }
        }
        Ok(Self {
            n_keypoints: keypoints.len(),
            rig,
            model_points,
            gt_pose,
            corruption,
            keypoints,
        })
    }

    pub fn keypoints(&self) -> &KeypointSet3D {
        &self.keypoints
    }
}

/// Greedy max-min selection of `n` points starting at `seed_index`; ties go
/// to the lowest index.
pub fn farthest_point_sampling(points: &[Vector3<f64>], n: usize, seed_index: usize) -> Result<KeypointSet3D> {
    if n > points.len() {
        return Err(KvnError::InsufficientPoints {
            requested: n,
            available: points.len(),
        });
    }
    if n == 0 {
        return KeypointSet3D::new(Vec::new());
    }
    if seed_index >= points.len() {
        return Err(KvnError::invalid(format!(
            "seed index {seed_index} out of range for {} points",
            points.len()
        )));
    }
    let mut selected = vec![seed_index];
    let mut min_dist: Vec<f64> = points.iter().map(|p| (p - points[seed_index]).norm_squared()).collect();
    min_dist[seed_index] = f64::NEG_INFINITY;
    while selected.len() < n {
        let mut best = 0;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > min_dist[best] {
                best = i;
            }
        }
        selected.push(best);
        let chosen = points[best];
        for (i, d) in min_dist.iter_mut().enumerate() {
            if *d != f64::NEG_INFINITY {
                *d = d.min((points[i] - chosen).norm_squared());
            }
        }
        min_dist[best] = f64::NEG_INFINITY;
    }
    KeypointSet3D::new(selected.into_iter().map(|i| points[i]).collect())
}

/// Rendered targets of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRender {
    pub fields: Vec<VectorField>,
    pub mask: SegMask,
    pub annotation: GroundTruthAnnotation,
}

/// Counter-clockwise convex hull (Andrew's monotone chain) without collinear points.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| (a - o).perp(&(b - o));
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Boundary-inclusive containment test for a counter-clockwise hull.
pub fn hull_contains(hull: &[Vector2<f64>], p: &Vector2<f64>) -> bool {
    const EPS: f64 = 1e-9;
    match hull.len() {
        0 => false,
        1 => (hull[0] - p).norm() <= EPS,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let ab = b - a;
            let t = (p - a).dot(&ab) / ab.norm_squared();
            (0.0..=1.0).contains(&t) && (a + ab * t - p).norm() <= EPS
        }
        n => (0..n).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % n];
            (b - a).perp(&(p - a)) >= -EPS * (b - a).norm()
        }),
    }
}

fn unit_towards(target: &Vector2<f64>, pixel: &Vector2<f64>) -> Vector2<f64> {
    let d = target - pixel;
    let n = d.norm();
    if n < ZERO_NORM {
        Vector2::zeros()
    } else {
        d / n
    }
}

/// Exact fields, convex-hull mask and annotation for every camera.
///
/// Votes are filled at every pixel, not only inside the mask; consumers only
/// read them where the mask is set.
pub fn render_fields(spec: &SceneSpec) -> Result<Vec<CameraRender>> {
    (0..spec.rig.len())
        .into_par_iter()
        .map(|i| {
            let cam = spec.rig.camera(i);
            let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
            let keypoints2d = spec
                .keypoints
                .points()
                .iter()
                .map(|p| spec.rig.project(i, &spec.gt_pose, p))
                .collect::<Result<Vec<_>>>()?;
            let projected: Vec<Vector2<f64>> = spec
                .model_points
                .iter()
                .filter_map(|p| spec.rig.project(i, &spec.gt_pose, p).ok())
                .collect();
            let hull = convex_hull(&projected);
            let mask_data = (0..w * h)
                .map(|idx| {
                    let p = Vector2::new((idx % w) as f64, (idx / w) as f64);
                    if hull_contains(&hull, &p) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let mask = SegMask::new(w, h, mask_data)?;
            let fields = keypoints2d
                .iter()
                .map(|k| VectorField::from_fn(w, h, |x, y| unit_towards(k, &Vector2::new(x as f64, y as f64))))
                .collect();
            Ok(CameraRender {
                fields,
                annotation: GroundTruthAnnotation {
                    keypoints2d,
                    gt_mask: mask.clone(),
                },
                mask,
            })
        })
        .collect()
}

fn rotate(v: &Vector2<f64>, angle: f64) -> Vector2<f64> {
    let (s, c) = angle.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Seeded corruption of rendered targets.
///
/// Every non-zero vote is rotated by a `N(0, σ²)` angle, then
/// `round(ρ·|mask|)` mask pixels per keypoint get a uniformly random
/// direction, then `round(f·W·H)` raster pixels have their mask value
/// flipped. The annotation is left untouched.
pub fn corrupt(renders: &[CameraRender], spec: &CorruptionSpec) -> Result<Vec<CameraRender>> {
    let noise = Normal::new(0.0, spec.angular_noise_sigma).map_err(|e| KvnError::invalid(e.to_string()))?;
    Ok(renders
        .par_iter()
        .enumerate()
        .map(|(i, render)| {
            let mask_pixels = render.mask.eligible_pixels();
            let fields = render
                .fields
                .par_iter()
                .enumerate()
                .map(|(j, field)| {
                    let mut out = field.clone();
                    if spec.angular_noise_sigma > 0.0 {
                        let mut rng = rng::stream(spec.rng_seed, stream_id(i, j, PURPOSE_NOISE));
                        for v in out.data_mut() {
                            let angle: f64 = noise.sample(&mut rng);
                            if v.norm() >= ZERO_NORM {
                                *v = rotate(v, angle);
                            }
                        }
                    }
                    let n_out = (spec.outlier_fraction * mask_pixels.len() as f64).round() as usize;
                    if n_out > 0 {
                        let mut rng = rng::stream(spec.rng_seed, stream_id(i, j, PURPOSE_OUTLIERS));
                        for k in index::sample(&mut rng, mask_pixels.len(), n_out) {
                            let angle = rng.random_range(0.0..std::f64::consts::TAU);
                            out.data_mut()[mask_pixels[k]] = Vector2::new(angle.cos(), angle.sin());
                        }
                    }
                    out
                })
                .collect();
            let mut mask = render.mask.clone();
            let n_px = mask.data().len();
            let n_flip = (spec.mask_flip_fraction * n_px as f64).round() as usize;
            if n_flip > 0 {
                let mut rng = rng::stream(spec.rng_seed, stream_id(i, CAMERA_SLOT, PURPOSE_FLIP));
                for k in index::sample(&mut rng, n_px, n_flip) {
                    let m = &mut mask.data_mut()[k];
                    *m = 1.0 - *m;
                }
            }
            CameraRender {
                fields,
                mask,
                annotation: render.annotation.clone(),
            }
        })
        .collect())
}

/// Options of [`random_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSceneOptions {
    pub width: u32,
    pub height: u32,
    pub n_keypoints: usize,
    pub n_model_points: usize,
    pub stereo: bool,
    /// Horizontal camera separation, meters.
    pub baseline: f64,
    /// Distance of the object from the rig, meters.
    pub depth: f64,
    /// Approximate object extent, meters.
    pub object_size: f64,
}

impl Default for RandomSceneOptions {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            n_keypoints: 8,
            n_model_points: 200,
            stereo: true,
            baseline: 0.04,
            depth: 0.5,
            object_size: 0.1,
        }
    }
}

fn random_unit(rng: &mut crate::rng::KvnRng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Uniformly random rotation (normalized Gaussian quaternion).
pub fn random_rotation(rng: &mut crate::rng::KvnRng) -> Matrix3<f64> {
    let q = nalgebra::Quaternion::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    orthogonalize(
        &nalgebra::UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner(),
    )
}

/// A random box-shaped object in front of a (stereo) rig whose focal length
/// makes the object span roughly half the image.
pub fn random_scene(seed: u64, opts: &RandomSceneOptions, corruption: CorruptionSpec) -> Result<SceneSpec> {
    if opts.width < 8 || opts.height < 8 {
        return Err(KvnError::invalid("images must be at least 8x8"));
    }
    if !(opts.depth > opts.object_size) || !(opts.object_size > 0.0) {
        return Err(KvnError::invalid("object must be smaller than its distance to the rig"));
    }
    let mut rng = rng::stream(seed, 0);
    let focal = 0.5 * opts.width.min(opts.height) as f64 * opts.depth / opts.object_size;
    let intrinsics = CameraIntrinsics::new(
        focal,
        focal,
        (opts.width as f64 - 1.0) / 2.0,
        (opts.height as f64 - 1.0) / 2.0,
        opts.width,
        opts.height,
    )?;
    let rig = if opts.stereo {
        StereoRig::horizontal_stereo(intrinsics, opts.baseline)
    } else {
        StereoRig::monocular(intrinsics)
    };

    let half = Vector3::new(
        rng.random_range(0.6..1.0),
        rng.random_range(0.6..1.0),
        rng.random_range(0.6..1.0),
    ) * (opts.object_size / 2.0);
    let model_points: Vec<Vector3<f64>> = (0..opts.n_model_points)
        .map(|_| {
            // Points on the box surface: push a random direction onto the nearest face.
            let d = random_unit(&mut rng);
            let scale = (0..3).map(|k| d[k].abs() / half[k]).fold(0.0, f64::max);
            d / scale
        })
        .collect();

    let center_x = if opts.stereo { opts.baseline / 2.0 } else { 0.0 };
    let jitter = opts.object_size * 0.05;
    let translation = Vector3::new(
        center_x + rng.random_range(-jitter..jitter),
        rng.random_range(-jitter..jitter),
        opts.depth * rng.random_range(0.95..1.05),
    );
    let gt_pose = Pose::new(random_rotation(&mut rng), translation)?;
    SceneSpec::new(rig, model_points, opts.n_keypoints, gt_pose, corruption)
}
