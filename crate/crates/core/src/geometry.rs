//! Pinhole cameras, rigid transforms and the stereo rig.
//!
//! Pixel coordinates are continuous with `(0, 0)` at the center of the
//! top-left pixel, so raster index `(x, y)` sits exactly at `(x, y)`.
//! Rotations are stored as 3×3 matrices; local increments used by the
//! solvers are axis-angle 3-vectors applied on the left.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};

use crate::error::{KvnError, Result};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(KvnError::invalid(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(KvnError::invalid("principal point must be finite"));
        }
        if width == 0 || height == 0 {
            return Err(KvnError::invalid(format!(
                "image size must be at least 1x1 (got {width}x{height})"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a point given in this camera's frame onto the image plane.
    pub fn project(&self, point_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
        project(self, point_cam)
    }

    /// Maps a pixel to normalized image coordinates `(x/z, y/z)`.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }
}

pub fn project(intrinsics: &CameraIntrinsics, point_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
    let z = point_cam.z;
    if !(z > 0.0) {
        return Err(KvnError::BehindCamera { depth: z });
    }
    Ok(Vector2::new(
        intrinsics.fx * point_cam.x / z + intrinsics.cx,
        intrinsics.fy * point_cam.y / z + intrinsics.cy,
    ))
}

/// Jacobian of [`project`] with respect to the camera-frame point.
pub fn project_jacobian(intrinsics: &CameraIntrinsics, point_cam: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
    let z = point_cam.z;
    if !(z > 0.0) {
        return Err(KvnError::BehindCamera { depth: z });
    }
    let inv_z = 1.0 / z;
    let inv_z2 = inv_z * inv_z;
    Ok(Matrix2x3::new(
        intrinsics.fx * inv_z,
        0.0,
        -intrinsics.fx * point_cam.x * inv_z2,
        0.0,
        intrinsics.fy * inv_z,
        -intrinsics.fy * point_cam.y * inv_z2,
    ))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula: rotation matrix for the axis-angle vector `omega`.
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (a, b) = if theta2 < 1e-16 {
        // Taylor expansions of sin(θ)/θ and (1 - cos θ)/θ².
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`exp_so3`], returning the axis-angle vector with angle in `[0, π]`.
pub fn log_so3(rotation: &Matrix3<f64>) -> Vector3<f64> {
    let skew_part = vee(&(rotation - rotation.transpose())) * 0.5;
    let sin_theta = skew_part.norm();
    let cos_theta = ((rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-8 {
        return skew_part;
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return skew_part * (theta / sin_theta);
    }

    // Near π the skew part vanishes; recover the axis from the symmetric part,
    // (R + Rᵀ)/2 - cos θ I = (1 - cos θ) a aᵀ.
    let sym = (rotation + rotation.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let one_minus_cos = 1.0 - cos_theta;
    let k = (0..3).max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)])).unwrap_or(0);
    let a_k = (sym[(k, k)] / one_minus_cos).max(0.0).sqrt();
    let mut axis = sym.column(k).into_owned() / (one_minus_cos * a_k);
    axis /= axis.norm();
    if axis.dot(&skew_part) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Projects an arbitrary 3×3 matrix onto SO(3) (closest rotation in Frobenius norm).
pub fn orthogonalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Rigid transform `x ↦ rotation·x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > ROTATION_TOLERANCE || det_err > ROTATION_TOLERANCE {
            return Err(KvnError::invalid(format!(
                "rotation is not in SO(3) (orthonormality error {ortho_err:.3e}, det error {det_err:.3e})"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(KvnError::invalid("translation must be finite"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_axis_angle(omega: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: exp_so3(&omega),
            translation,
        }
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        log_so3(&self.rotation)
    }

    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies a local increment `(ω, δt)`: `R ← exp(ω)·R`, `t ← t + δt`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            rotation: exp_so3(&omega) * self.rotation,
            translation: self.translation + dt,
        }
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.rotation - Matrix3::identity()).amax() <= tol && self.translation.amax() <= tol
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        log_so3(&(self.rotation * other.rotation.transpose())).norm()
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

pub fn transform(pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
    pose.transform(point)
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Projection of `pose·point` through `camera_pose` and `intrinsics`, with the
/// Jacobian of the pixel with respect to the local increment of `pose`
/// (see [`Pose::retract`]).
pub fn project_transform_jacobian(
    intrinsics: &CameraIntrinsics,
    camera_pose: &Pose,
    pose: &Pose,
    point: &Vector3<f64>,
) -> Result<(Vector2<f64>, Matrix2x6)> {
    let rotated = pose.rotation * point;
    let in_rig = rotated + pose.translation;
    let in_cam = camera_pose.transform(&in_rig);
    let pixel = project(intrinsics, &in_cam)?;
    let dpix = project_jacobian(intrinsics, &in_cam)?;
    let dpix_rig = dpix * camera_pose.rotation;
    let mut jac = Matrix2x6::zeros();
    jac.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dpix_rig * -skew(&rotated)));
    jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&dpix_rig);
    Ok((pixel, jac))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigCamera {
    pub intrinsics: CameraIntrinsics,
    /// Rig frame to camera frame.
    pub pose: Pose,
}

/// Calibrated multi-camera rig whose frame coincides with camera 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoRig {
    cameras: Vec<RigCamera>,
}

impl StereoRig {
    pub fn new(cameras: Vec<RigCamera>) -> Result<Self> {
        let first = cameras
            .first()
            .ok_or_else(|| KvnError::invalid("a rig needs at least one camera"))?;
        if !first.pose.is_identity(ROTATION_TOLERANCE) {
            return Err(KvnError::invalid("camera 0 pose must be the identity"));
        }
        Ok(Self { cameras })
    }

    pub fn monocular(intrinsics: CameraIntrinsics) -> Self {
        Self {
            cameras: vec![RigCamera {
                intrinsics,
                pose: Pose::identity(),
            }],
        }
    }

    /// Two identical cameras, the second displaced by `baseline` along +x of
    /// camera 0 (its rig-to-camera translation is `-baseline`).
    pub fn horizontal_stereo(intrinsics: CameraIntrinsics, baseline: f64) -> Self {
        Self {
            cameras: vec![
                RigCamera {
                    intrinsics,
                    pose: Pose::identity(),
                },
                RigCamera {
                    intrinsics,
                    pose: Pose {
                        rotation: Matrix3::identity(),
                        translation: Vector3::new(-baseline, 0.0, 0.0),
                    },
                },
            ],
        }
    }

    pub fn cameras(&self) -> &[RigCamera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, i: usize) -> &RigCamera {
        &self.cameras[i]
    }

    /// Pixel of an object-frame point seen by camera `i` under object pose `object`.
    pub fn project(&self, i: usize, object: &Pose, point: &Vector3<f64>) -> Result<Vector2<f64>> {
        let cam = &self.cameras[i];
        project(&cam.intrinsics, &cam.pose.transform(&object.transform(point)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet3D {
    points: Vec<Vector3<f64>>,
}

impl KeypointSet3D {
    /// Accepts any number of pairwise-distinct finite points; the pose solvers
    /// separately require at least four.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(KvnError::invalid("keypoints must be finite"));
        }
        for (i, a) in points.iter().enumerate() {
            for (j, b) in points.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(KvnError::invalid(format!("keypoints {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max((a - b).norm());
            }
        }
        best
    }
}
