//! Uncertainty-weighted multi-view PnP.
//!
//! The object pose minimizes `Σ_i Σ_j e_ijᵀ Σ_ij⁻¹ e_ij` over every camera `i`
//! and observed keypoint `j`, where `e_ij` is the reprojection residual in
//! camera `i`. The solver is Levenberg–Marquardt on a left-multiplied
//! axis-angle increment of the rotation plus an additive translation step.

use nalgebra::{
    DMatrix, Matrix2, Matrix3, Matrix6, SMatrix, SVector, SymmetricEigen, Vector2, Vector3, Vector4, Vector6,
};

use crate::error::{KvnError, Result};
use crate::geometry::{orthogonalize, project, project_transform_jacobian, KeypointSet3D, Matrix2x6, Pose, StereoRig};
use crate::voting::KeypointEstimate;

/// Diagonal loading added to every covariance before inversion, in px².
pub const COVARIANCE_CONDITIONING: f64 = 1e-6;
/// Residual assigned (per axis) to an observation behind its camera.
pub const BEHIND_CAMERA_RESIDUAL: f64 = 1e3;
/// Residual size, in pixels, below which the gradient test treats a fit as exact.
pub const RESIDUAL_FLOOR_PX: f64 = 1e-3;
const MIN_POINTS: usize = 4;
const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e16;

#[derive(Debug, Clone, PartialEq)]
pub struct PnPProblem {
    rig: StereoRig,
    keypoints: KeypointSet3D,
    /// `observations[i][j]`: keypoint `j` seen by camera `i`, if detected.
    observations: Vec<Vec<Option<KeypointEstimate>>>,
}

impl PnPProblem {
    /// Checks dimensions only; observation-count requirements are enforced
    /// by the solvers so that under-constrained problems can be reported as such.
    pub fn new(
        rig: StereoRig,
        keypoints: KeypointSet3D,
        observations: Vec<Vec<Option<KeypointEstimate>>>,
    ) -> Result<Self> {
        if observations.len() != rig.len() {
            return Err(KvnError::shape(
                format!("observations for {} cameras", rig.len()),
                format!("{} rows", observations.len()),
            ));
        }
        for (i, row) in observations.iter().enumerate() {
            if row.len() != keypoints.len() {
                return Err(KvnError::shape(
                    format!("{} keypoints in camera {i}", keypoints.len()),
                    format!("{}", row.len()),
                ));
            }
            for obs in row.iter().flatten() {
                if obs.mean.iter().chain(obs.covariance.iter()).any(|v| !v.is_finite()) {
                    return Err(KvnError::invalid(format!("non-finite observation in camera {i}")));
                }
            }
        }
        Ok(Self {
            rig,
            keypoints,
            observations,
        })
    }

    pub fn rig(&self) -> &StereoRig {
        &self.rig
    }

    pub fn keypoints(&self) -> &KeypointSet3D {
        &self.keypoints
    }

    pub fn observations(&self) -> &[Vec<Option<KeypointEstimate>>] {
        &self.observations
    }

    pub fn observation(&self, i: usize, j: usize) -> Option<&KeypointEstimate> {
        self.observations.get(i)?.get(j)?.as_ref()
    }

    pub fn observation_count(&self) -> usize {
        self.observations.iter().flatten().filter(|o| o.is_some()).count()
    }

    /// Number of distinct 3D keypoints observed in at least one camera.
    pub fn observed_points(&self) -> usize {
        (0..self.keypoints.len())
            .filter(|&j| self.observations.iter().any(|row| row[j].is_some()))
            .count()
    }

    /// Same problem with every covariance multiplied by `factor`.
    pub fn with_scaled_covariances(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for obs in out.observations.iter_mut().flatten().flatten() {
            obs.covariance *= factor;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub g_tol: f64,
    pub x_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            g_tol: 1e-10,
            x_tol: 1e-12,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPSolution {
    pub pose: Pose,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Jacobi-scaled gradient norm at `pose`, see [`scaled_gradient_norm`].
    pub gradient_norm: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Reprojection residual `Π_i(R_i(R·K_j + t) + t_i) − k_ij`.
pub fn residual(problem: &PnPProblem, pose: &Pose, i: usize, j: usize) -> Result<Vector2<f64>> {
    let obs = observation_or_err(problem, i, j)?;
    let cam = problem.rig.camera(i);
    let pixel = project(
        &cam.intrinsics,
        &cam.pose.transform(&pose.transform(&problem.keypoints.points()[j])),
    )?;
    Ok(pixel - obs.mean)
}

/// Residual and its Jacobian with respect to the local pose increment.
pub fn residual_jacobian(problem: &PnPProblem, pose: &Pose, i: usize, j: usize) -> Result<(Vector2<f64>, Matrix2x6)> {
    let obs = observation_or_err(problem, i, j)?;
    let cam = problem.rig.camera(i);
    let (pixel, jac) = project_transform_jacobian(&cam.intrinsics, &cam.pose, pose, &problem.keypoints.points()[j])?;
    Ok((pixel - obs.mean, jac))
}

fn observation_or_err(problem: &PnPProblem, i: usize, j: usize) -> Result<&KeypointEstimate> {
    problem
        .observation(i, j)
        .ok_or_else(|| KvnError::invalid(format!("no observation of keypoint {j} in camera {i}")))
}

/// Information matrix `(Σ + λI)⁻¹` used by the weighted cost.
pub fn information(covariance: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let conditioned = covariance + Matrix2::identity() * COVARIANCE_CONDITIONING;
    conditioned
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| KvnError::invalid("covariance is not invertible after conditioning"))
}

#[derive(Debug, Clone, Copy)]
enum Weighting {
    Covariance,
    Identity,
}

struct Term {
    camera: usize,
    keypoint: usize,
    info: Matrix2<f64>,
}

fn build_terms(problem: &PnPProblem, weighting: Weighting) -> Result<Vec<Term>> {
    let mut terms = Vec::with_capacity(problem.observation_count());
    for (i, row) in problem.observations.iter().enumerate() {
        for (j, obs) in row.iter().enumerate() {
            if let Some(obs) = obs {
                let info = match weighting {
                    Weighting::Covariance => information(&obs.covariance)?,
                    Weighting::Identity => Matrix2::identity(),
                };
                terms.push(Term {
                    camera: i,
                    keypoint: j,
                    info,
                });
            }
        }
    }
    Ok(terms)
}

struct Linearization {
    cost: f64,
    hessian: Matrix6<f64>,
    gradient: Vector6<f64>,
    in_front: usize,
}

fn linearize(problem: &PnPProblem, terms: &[Term], pose: &Pose) -> Linearization {
    let mut lin = Linearization {
        cost: 0.0,
        hessian: Matrix6::zeros(),
        gradient: Vector6::zeros(),
        in_front: 0,
    };
    for term in terms {
        let cam = problem.rig.camera(term.camera);
        let obs = problem.observations[term.camera][term.keypoint]
            .as_ref()
            .expect("term refers to an observation");
        match project_transform_jacobian(
            &cam.intrinsics,
            &cam.pose,
            pose,
            &problem.keypoints.points()[term.keypoint],
        ) {
            Ok((pixel, jac)) => {
                let e = pixel - obs.mean;
                let we = term.info * e;
                lin.cost += e.dot(&we);
                lin.gradient += jac.transpose() * we;
                lin.hessian += jac.transpose() * term.info * jac;
                lin.in_front += 1;
            }
            Err(_) => {
                let e = Vector2::repeat(BEHIND_CAMERA_RESIDUAL);
                lin.cost += e.dot(&(term.info * e));
            }
        }
    }
    lin
}

fn cost_only(problem: &PnPProblem, terms: &[Term], pose: &Pose) -> f64 {
    terms
        .iter()
        .map(|term| {
            let cam = problem.rig.camera(term.camera);
            let obs = problem.observations[term.camera][term.keypoint]
                .as_ref()
                .expect("term refers to an observation");
            let point = cam
                .pose
                .transform(&pose.transform(&problem.keypoints.points()[term.keypoint]));
            let e = match project(&cam.intrinsics, &point) {
                Ok(pixel) => pixel - obs.mean,
                Err(_) => Vector2::repeat(BEHIND_CAMERA_RESIDUAL),
            };
            e.dot(&(term.info * e))
        })
        .sum()
}

fn term_pixel(problem: &PnPProblem, term: &Term, pose: &Pose) -> Option<Vector2<f64>> {
    let cam = problem.rig.camera(term.camera);
    let point = cam
        .pose
        .transform(&pose.transform(&problem.keypoints.points()[term.keypoint]));
    project(&cam.intrinsics, &point).ok()
}

/// `cost(to) − cost(from)` as `Σ (e_to − e_from)ᵀ W (e_to + e_from)`, with a
/// bound on its rounding error.
///
/// The difference of projections does not cancel against the observation,
/// so small steps are resolved far below the rounding error of the cost
/// itself; what remains is the rounding of each projected pixel.
fn cost_change(problem: &PnPProblem, terms: &[Term], from: &Pose, to: &Pose) -> (f64, f64) {
    terms
        .iter()
        .map(|term| {
            let obs = problem.observations[term.camera][term.keypoint]
                .as_ref()
                .expect("term refers to an observation")
                .mean;
            let residual = |p: Option<Vector2<f64>>| p.map_or(Vector2::repeat(BEHIND_CAMERA_RESIDUAL), |p| p - obs);
            match (term_pixel(problem, term, from), term_pixel(problem, term, to)) {
                (Some(a), Some(b)) => {
                    let weighted_sum = term.info * (b + a - 2.0 * obs);
                    let pixel_rounding = 8.0 * f64::EPSILON * (a.amax() + b.amax());
                    ((b - a).dot(&weighted_sum), pixel_rounding * weighted_sum.lp_norm(1))
                }
                (a, b) => {
                    let (ea, eb) = (residual(a), residual(b));
                    (eb.dot(&(term.info * eb)) - ea.dot(&(term.info * ea)), 0.0)
                }
            }
        })
        .fold((0.0, 0.0), |(c, r), (dc, dr)| (c + dc, r + dr))
}

/// Covariance-weighted cost `Σ eᵀ (Σ + λI)⁻¹ e` at `pose`.
pub fn weighted_cost(problem: &PnPProblem, pose: &Pose) -> Result<f64> {
    let terms = build_terms(problem, Weighting::Covariance)?;
    Ok(cost_only(problem, &terms, pose))
}

/// Squared reprojection error `Σ eᵀe` at `pose`.
pub fn unweighted_cost(problem: &PnPProblem, pose: &Pose) -> Result<f64> {
    let terms = build_terms(problem, Weighting::Identity)?;
    Ok(cost_only(problem, &terms, pose))
}

fn check_constrained(problem: &PnPProblem) -> Result<()> {
    let count = problem.observation_count();
    let points = problem.observed_points();
    if count < MIN_POINTS || points < MIN_POINTS {
        return Err(KvnError::DegenerateConfiguration(format!(
            "{count} observations of {points} distinct keypoints; at least {MIN_POINTS} distinct keypoints are required"
        )));
    }
    Ok(())
}

/// `max_k |g_k| / sqrt(H_kk · max(cost, floor))`.
///
/// Since `|g_k| ≤ sqrt(H_kk · cost)`, this is the cosine between the whitened
/// residual and each Jacobian column. `floor` is the cost of residuals of
/// [`RESIDUAL_FLOOR_PX`] on every observation; below it the residuals count as
/// exact and the measure falls off with the cost. Scaling every covariance by
/// the same factor leaves the measure unchanged.
pub fn scaled_gradient_norm(gradient: &Vector6<f64>, hessian: &Matrix6<f64>, cost: f64, floor: f64) -> f64 {
    let c = cost.max(floor);
    (0..6)
        .map(|k| {
            let h = hessian[(k, k)];
            if h > 0.0 && c > 0.0 {
                gradient[k].abs() / (h * c).sqrt()
            } else {
                gradient[k].abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of the Jacobi-scaled normal matrix.
fn scaled_min_eigenvalue(hessian: &Matrix6<f64>) -> f64 {
    let d = hessian.diagonal().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
    let scaled = Matrix6::from_fn(|r, c| hessian[(r, c)] * d[r] * d[c]);
    SymmetricEigen::new(scaled).eigenvalues.min()
}

fn solve_lm(problem: &PnPProblem, init: &Pose, opts: &SolverOptions, weighting: Weighting) -> Result<PnPSolution> {
    check_constrained(problem)?;
    if init
        .rotation
        .iter()
        .chain(init.translation.iter())
        .any(|v| !v.is_finite())
    {
        return Err(KvnError::BadInitialization("initial pose is not finite".into()));
    }
    let terms = build_terms(problem, weighting)?;
    let floor = RESIDUAL_FLOOR_PX * RESIDUAL_FLOOR_PX * terms.iter().map(|t| t.info.trace()).sum::<f64>();

    let mut pose = *init;
    let mut lin = linearize(problem, &terms, &pose);
    if lin.in_front == 0 {
        return Err(KvnError::BadInitialization(
            "every observed keypoint is behind its camera at the initial pose".into(),
        ));
    }
    if scaled_min_eigenvalue(&lin.hessian) < 1e-12 {
        return Err(KvnError::DegenerateConfiguration(
            "normal equations are rank deficient at the initial pose".into(),
        ));
    }

    let mut damping = INITIAL_DAMPING;
    let mut iterations = 0;
    // Accumulated from exact cost changes; agrees with a direct evaluation to rounding.
    let mut cost = lin.cost;
    let mut history = vec![cost];

    while iterations < opts.max_iter {
        if scaled_gradient_norm(&lin.gradient, &lin.hessian, lin.cost, floor) < opts.g_tol {
            break;
        }
        iterations += 1;

        let mut accepted = None;
        while damping <= MAX_DAMPING {
            let mut lhs = lin.hessian;
            for k in 0..6 {
                lhs[(k, k)] += damping * lin.hessian[(k, k)].max(1e-12);
            }
            let Some(chol) = lhs.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&(-lin.gradient));
            let candidate = pose.retract(&step);
            let (change, rounding) = cost_change(problem, &terms, &pose, &candidate);
            if change <= 0.0 {
                damping = (damping * 0.1).max(1e-12);
                accepted = Some((candidate, step, change));
                break;
            }
            // A change lost in rounding is taken as no change; the step is kept
            // only if it brings the gradient closer to zero.
            if change <= rounding {
                let next = linearize(problem, &terms, &candidate);
                let current = scaled_gradient_norm(&lin.gradient, &lin.hessian, lin.cost, floor);
                if scaled_gradient_norm(&next.gradient, &next.hessian, next.cost, floor) < current {
                    accepted = Some((candidate, step, 0.0));
                    break;
                }
            }
            // A step that cannot change the cost any more has converged in x.
            if step.amax() < opts.x_tol {
                break;
            }
            damping *= 10.0;
        }

        let Some((candidate, step, change)) = accepted else {
            break;
        };
        pose = candidate;
        lin = linearize(problem, &terms, &pose);
        cost += change;
        history.push(cost);
        if step.amax() < opts.x_tol {
            break;
        }
    }

    if pose
        .rotation
        .iter()
        .chain(pose.translation.iter())
        .any(|v| !v.is_finite())
    {
        return Err(KvnError::DegenerateConfiguration("solver diverged".into()));
    }
    let gradient_norm = scaled_gradient_norm(&lin.gradient, &lin.hessian, lin.cost, floor);
    Ok(PnPSolution {
        pose,
        final_cost: cost,
        iterations,
        converged: gradient_norm < opts.g_tol,
        gradient_norm,
        cost_history: history,
    })
}

/// Minimizes the covariance-weighted reprojection error over all cameras.
pub fn solve_weighted(problem: &PnPProblem, init: &Pose, opts: &SolverOptions) -> Result<PnPSolution> {
    solve_lm(problem, init, opts, Weighting::Covariance)
}

/// Minimizes the plain squared reprojection error over all cameras.
pub fn solve_unweighted(problem: &PnPProblem, init: &Pose, opts: &SolverOptions) -> Result<PnPSolution> {
    solve_lm(problem, init, opts, Weighting::Identity)
}

/// Closed-form pose from the camera-0 correspondences (EPnP, or a plane
/// homography when the observed keypoints are coplanar).
pub fn initialize_pose(problem: &PnPProblem) -> Result<Pose> {
    initialize_pose_from_camera(problem, 0)
}

/// Closed-form pose from the correspondences of camera `i`, expressed in the rig frame.
pub fn initialize_pose_from_camera(problem: &PnPProblem, i: usize) -> Result<Pose> {
    if i >= problem.rig.len() {
        return Err(KvnError::invalid(format!(
            "camera {i} not in rig of {}",
            problem.rig.len()
        )));
    }
    let cam = problem.rig.camera(i);
    let (points, rays): (Vec<Vector3<f64>>, Vec<Vector2<f64>>) = problem.observations[i]
        .iter()
        .zip(problem.keypoints.points())
        .filter_map(|(obs, p)| obs.as_ref().map(|o| (*p, cam.intrinsics.normalize(&o.mean))))
        .unzip();
    if points.len() < MIN_POINTS {
        return Err(KvnError::InsufficientObservations {
            found: points.len(),
            required: MIN_POINTS,
        });
    }
    let in_camera = closed_form_pose(&points, &rays)?;
    Ok(cam.pose.inverse().compose(&in_camera))
}

/// Pose mapping `points` onto the normalized image rays `(x/z, y/z)`.
pub fn closed_form_pose(points: &[Vector3<f64>], rays: &[Vector2<f64>]) -> Result<Pose> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let scatter = points
        .iter()
        .map(|p| (p - centroid) * (p - centroid).transpose())
        .sum::<Matrix3<f64>>();
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    if !(largest > 0.0) {
        return Err(KvnError::DegenerateConfiguration("all keypoints coincide".into()));
    }
    if eig.eigenvalues[order[1]] < 1e-10 * largest {
        return Err(KvnError::DegenerateConfiguration("keypoints are collinear".into()));
    }
    if eig.eigenvalues[order[2]] < 1e-10 * largest {
        let axes = Matrix3::from_columns(&[
            eig.eigenvectors.column(order[0]).into_owned(),
            eig.eigenvectors.column(order[1]).into_owned(),
            eig.eigenvectors
                .column(order[0])
                .cross(&eig.eigenvectors.column(order[1])),
        ]);
        planar_pose(points, rays, &centroid, &axes)
    } else {
        let controls = [
            centroid,
            centroid + eig.eigenvectors.column(order[0]) * (eig.eigenvalues[order[0]] / n).sqrt(),
            centroid + eig.eigenvectors.column(order[1]) * (eig.eigenvalues[order[1]] / n).sqrt(),
            centroid + eig.eigenvectors.column(order[2]) * (eig.eigenvalues[order[2]] / n).sqrt(),
        ];
        epnp(points, rays, &controls)
    }
}

fn reprojection_error(pose: &Pose, points: &[Vector3<f64>], rays: &[Vector2<f64>]) -> f64 {
    points
        .iter()
        .zip(rays)
        .map(|(p, r)| {
            let c = pose.transform(p);
            if c.z <= 0.0 {
                f64::INFINITY
            } else {
                (Vector2::new(c.x / c.z, c.y / c.z) - r).norm()
            }
        })
        .sum::<f64>()
        / points.len() as f64
}

/// Rigid transform best aligning `from` onto `to` (Kabsch).
fn align(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Pose {
    let n = from.len() as f64;
    let cf = from.iter().sum::<Vector3<f64>>() / n;
    let ct = to.iter().sum::<Vector3<f64>>() / n;
    let cross = from
        .iter()
        .zip(to)
        .map(|(f, t)| (t - ct) * (f - cf).transpose())
        .sum::<Matrix3<f64>>();
    let rotation = orthogonalize(&cross);
    Pose {
        rotation,
        translation: ct - rotation * cf,
    }
}

// Control-point pairs used by the distance constraints.
const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn epnp(points: &[Vector3<f64>], rays: &[Vector2<f64>], controls: &[Vector3<f64>; 4]) -> Result<Pose> {
    let basis = Matrix3::from_columns(&[
        controls[1] - controls[0],
        controls[2] - controls[0],
        controls[3] - controls[0],
    ]);
    let basis_inv = basis
        .try_inverse()
        .ok_or_else(|| KvnError::DegenerateConfiguration("control points are degenerate".into()))?;
    let alphas: Vec<Vector4<f64>> = points
        .iter()
        .map(|p| {
            let b = basis_inv * (p - controls[0]);
            Vector4::new(1.0 - b.sum(), b.x, b.y, b.z)
        })
        .collect();

    let mut m = DMatrix::<f64>::zeros(2 * points.len(), 12);
    for (k, (a, r)) in alphas.iter().zip(rays).enumerate() {
        for c in 0..4 {
            m[(2 * k, 3 * c)] = a[c];
            m[(2 * k, 3 * c + 2)] = -a[c] * r.x;
            m[(2 * k + 1, 3 * c + 1)] = a[c];
            m[(2 * k + 1, 3 * c + 2)] = -a[c] * r.y;
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null: Vec<[Vector3<f64>; 4]> = order[..4]
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k);
            [0, 1, 2, 3].map(|c| Vector3::new(v[3 * c], v[3 * c + 1], v[3 * c + 2]))
        })
        .collect();

    // Rows of the 6×10 system relating the products β_a β_b to squared control distances.
    let mut l = [[0.0; 10]; 6];
    let mut rho = [0.0; 6];
    for (row, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: Vec<Vector3<f64>> = null.iter().map(|v| v[a] - v[b]).collect();
        l[row] = [
            dv[0].dot(&dv[0]),
            2.0 * dv[0].dot(&dv[1]),
            dv[1].dot(&dv[1]),
            2.0 * dv[0].dot(&dv[2]),
            2.0 * dv[1].dot(&dv[2]),
            dv[2].dot(&dv[2]),
            2.0 * dv[0].dot(&dv[3]),
            2.0 * dv[1].dot(&dv[3]),
            2.0 * dv[2].dot(&dv[3]),
            dv[3].dot(&dv[3]),
        ];
        rho[row] = (controls[a] - controls[b]).norm_squared();
    }

    let mut candidates: Vec<[f64; 4]> = [
        betas_approx_1(&l, &rho),
        betas_approx_2(&l, &rho),
        betas_approx_3(&l, &rho),
    ]
    .into_iter()
    .flatten()
    .collect();
    // With four correspondences the null space is exactly four-dimensional and
    // the approximations above often start Gauss-Newton in the wrong basin.
    candidates.extend(sign_pattern_starts(&l, &rho));
    let mut best: Option<(f64, Pose)> = None;
    for betas in candidates {
        let betas = refine_betas(&l, &rho, betas);
        let ccs: [Vector3<f64>; 4] = [0, 1, 2, 3].map(|c| (0..4).map(|k| null[k][c] * betas[k]).sum::<Vector3<f64>>());
        let mut pcs: Vec<Vector3<f64>> = alphas.iter().map(|a| (0..4).map(|c| ccs[c] * a[c]).sum()).collect();
        if pcs.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            pcs.iter_mut().for_each(|p| *p = -*p);
        }
        let pose = align(points, &pcs);
        let err = reprojection_error(&pose, points, rays);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .filter(|p| p.rotation.iter().chain(p.translation.iter()).all(|v| v.is_finite()))
        .ok_or_else(|| KvnError::DegenerateConfiguration("EPnP found no finite pose".into()))
}

fn least_squares(l: &[[f64; 10]; 6], rho: &[f64; 6], cols: &[usize]) -> Option<Vec<f64>> {
    let a = DMatrix::from_fn(6, cols.len(), |r, c| l[r][cols[c]]);
    let b = DMatrix::from_fn(6, 1, |r, _| rho[r]);
    let svd = a.svd(true, true);
    let x = svd.solve(&b, 1e-12).ok()?;
    Some(x.column(0).iter().copied().collect())
}

fn betas_approx_1(l: &[[f64; 10]; 6], rho: &[f64; 6]) -> Option<[f64; 4]> {
    let b = least_squares(l, rho, &[0, 1, 3, 6])?;
    let (b0, sign) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), -1.0)
    } else {
        (b[0].sqrt(), 1.0)
    };
    if b0 == 0.0 {
        return None;
    }
    Some([b0, sign * b[1] / b0, sign * b[2] / b0, sign * b[3] / b0])
}

fn betas_approx_2(l: &[[f64; 10]; 6], rho: &[f64; 6]) -> Option<[f64; 4]> {
    let b = least_squares(l, rho, &[0, 1, 2])?;
    let (mut b0, b1) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 })
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    Some([b0, b1, 0.0, 0.0])
}

fn betas_approx_3(l: &[[f64; 10]; 6], rho: &[f64; 6]) -> Option<[f64; 4]> {
    let b = least_squares(l, rho, &[0, 1, 2, 3, 4])?;
    let (mut b0, b1) = if b[0] < 0.0 {
        ((-b[0]).sqrt(), if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 })
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    if b0 == 0.0 {
        return None;
    }
    Some([b0, b1, b[3] / b0, 0.0])
}

fn beta_products(b: &[f64; 4]) -> [f64; 10] {
    [
        b[0] * b[0],
        b[0] * b[1],
        b[1] * b[1],
        b[0] * b[2],
        b[1] * b[2],
        b[2] * b[2],
        b[0] * b[3],
        b[1] * b[3],
        b[2] * b[3],
        b[3] * b[3],
    ]
}

/// Directions `(±1, ±1, ±1, ±1)` and the coordinate axes, each scaled to best
/// fit the distance constraints.
fn sign_pattern_starts(l: &[[f64; 10]; 6], rho: &[f64; 6]) -> Vec<[f64; 4]> {
    let mut dirs: Vec<[f64; 4]> = (0..16u32)
        .map(|bits| [0, 1, 2, 3].map(|k| if bits & (1 << k) != 0 { -1.0 } else { 1.0 }))
        .collect();
    dirs.extend((0..4).map(|k| {
        let mut d = [0.0; 4];
        d[k] = 1.0;
        d
    }));
    dirs.into_iter()
        .filter_map(|d| {
            let products = beta_products(&d);
            let model: Vec<f64> = l
                .iter()
                .map(|row| row.iter().zip(products).map(|(a, b)| a * b).sum())
                .collect();
            let num: f64 = model.iter().zip(rho).map(|(m, r)| m * r).sum();
            let den: f64 = model.iter().map(|m| m * m).sum();
            (num > 0.0 && den > 0.0).then(|| {
                let s = (num / den).sqrt();
                d.map(|v| v * s)
            })
        })
        .collect()
}

/// Gauss–Newton on the four β coefficients against the distance constraints.
fn refine_betas(l: &[[f64; 10]; 6], rho: &[f64; 6], mut beta: [f64; 4]) -> [f64; 4] {
    for _ in 0..10 {
        let mut a = SMatrix::<f64, 6, 4>::zeros();
        let mut r = SVector::<f64, 6>::zeros();
        for row in 0..6 {
            let lr = &l[row];
            let [b0, b1, b2, b3] = beta;
            a[(row, 0)] = 2.0 * lr[0] * b0 + lr[1] * b1 + lr[3] * b2 + lr[6] * b3;
            a[(row, 1)] = lr[1] * b0 + 2.0 * lr[2] * b1 + lr[4] * b2 + lr[7] * b3;
            a[(row, 2)] = lr[3] * b0 + lr[4] * b1 + 2.0 * lr[5] * b2 + lr[8] * b3;
            a[(row, 3)] = lr[6] * b0 + lr[7] * b1 + lr[8] * b2 + 2.0 * lr[9] * b3;
            let products = beta_products(&beta);
            r[row] = rho[row] - lr.iter().zip(products).map(|(x, y)| x * y).sum::<f64>();
        }
        let Some(delta) = (a.transpose() * a).cholesky().map(|c| c.solve(&(a.transpose() * r))) else {
            break;
        };
        if delta.iter().any(|v| !v.is_finite()) {
            break;
        }
        for k in 0..4 {
            beta[k] += delta[k];
        }
    }
    beta
}

/// Pose of coplanar keypoints from the plane-to-image homography.
fn planar_pose(
    points: &[Vector3<f64>],
    rays: &[Vector2<f64>],
    centroid: &Vector3<f64>,
    axes: &Matrix3<f64>,
) -> Result<Pose> {
    let plane: Vec<Vector2<f64>> = points
        .iter()
        .map(|p| {
            let q = axes.transpose() * (p - centroid);
            Vector2::new(q.x, q.y)
        })
        .collect();
    let scale = plane.iter().map(|q| q.norm()).sum::<f64>() / plane.len() as f64;
    let mut a = DMatrix::<f64>::zeros(2 * plane.len(), 9);
    for (k, (q, r)) in plane.iter().zip(rays).enumerate() {
        let (x, y) = (q.x / scale, q.y / scale);
        let row0 = [x, y, 1.0, 0.0, 0.0, 0.0, -r.x * x, -r.x * y, -r.x];
        let row1 = [0.0, 0.0, 0.0, x, y, 1.0, -r.y * x, -r.y * y, -r.y];
        for c in 0..9 {
            a[(2 * k, c)] = row0[c];
            a[(2 * k + 1, c)] = row1[c];
        }
    }
    let eig = SymmetricEigen::new(a.transpose() * &a);
    let k = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(k);
    let mut hom = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    // Undo the plane-coordinate scaling on the first two columns.
    hom.column_mut(0).scale_mut(1.0 / scale);
    hom.column_mut(1).scale_mut(1.0 / scale);

    let norm = (hom.column(0).norm() + hom.column(1).norm()) * 0.5;
    if !(norm > 0.0) {
        return Err(KvnError::DegenerateConfiguration("degenerate homography".into()));
    }
    let mut hom = hom / norm;
    if hom[(2, 2)] < 0.0 {
        hom = -hom;
    }
    let r1 = hom.column(0).into_owned();
    let r2 = hom.column(1).into_owned();
    let rotation_plane = orthogonalize(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let t_plane = hom.column(2).into_owned();
    let rotation = rotation_plane * axes.transpose();
    Ok(Pose {
        rotation,
        translation: t_plane - rotation * centroid,
    })
}
