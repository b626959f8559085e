//! Pipeline commands behind the `kvn` binary: generate synthetic scenes,
//! vote for keypoints, solve for the pose, evaluate and check gradients.
//!
//! Each command reads and writes files under `RunConfig::out_dir` and also
//! returns what it wrote, so it can be driven from tests.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kvn_core::dsac::{GroundTruthAnnotation, PoolSpec};
use kvn_core::error::KvnError;
use kvn_core::geometry::Pose;
use kvn_core::gradcheck::{check_entropy_loss, check_kvn_loss, GradCheckReport, LossInputs};
use kvn_core::io::{
    AnnotationFile, CameraFiles, EstimatesFile, Manifest, ObservationJson, Raster, SceneFile, SolutionFile, VoteFailure,
};
use kvn_core::metrics::{auc_curve, evaluate, EvalSample, MetricReport};
use kvn_core::rng::{self, stream_id};
use kvn_core::synth::{corrupt, random_scene, render_fields, CorruptionSpec, RandomSceneOptions};
use kvn_core::umpnp::{
    initialize_pose, initialize_pose_from_camera, solve_unweighted, solve_weighted, PnPProblem, SolverOptions,
};
use kvn_core::voting::{keypoint_covariance, ransac_keypoint, SegMask, VectorField};
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use config::RunConfig;

pub const SCENE_FILE: &str = "scene.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ESTIMATES_FILE: &str = "estimates.json";
pub const SOLUTION_FILE: &str = "solution.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "auc_curve.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const MANIFEST_VERSION: u32 = 1;

const PURPOSE_VOTE: u64 = 0x10;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Raster::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub manifest: PathBuf,
    pub scene: PathBuf,
}

/// Generates a random scene, renders (and optionally corrupts) its voting
/// targets, and writes the scene, rasters, annotations and manifest.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenOutput> {
    let g = &cfg.gen;
    let corruption = CorruptionSpec::new(
        g.angular_noise_sigma,
        g.outlier_fraction,
        g.mask_flip_fraction,
        cfg.seed,
    )?;
    let opts = RandomSceneOptions {
        width: g.width,
        height: g.height,
        n_keypoints: g.n_keypoints,
        n_model_points: g.n_model_points,
        stereo: g.stereo,
        baseline: g.baseline,
        depth: g.depth,
        object_size: g.object_size,
    };
    let spec = random_scene(cfg.seed, &opts, corruption)?;
    let clean = render_fields(&spec)?;
    let renders = if corruption.is_none() {
        clean
    } else {
        corrupt(&clean, &corruption)?
    };

    let out = &cfg.out_dir;
    let mut scene = SceneFile::new(&spec.rig, spec.keypoints(), Some(&spec.gt_pose));
    scene.symmetric = g.symmetric;
    scene.model_points = Some(spec.model_points.iter().map(|p| [p.x, p.y, p.z]).collect());
    let scene_path = out.join(SCENE_FILE);
    write_json(&scene_path, &scene)?;

    let mut cameras = Vec::with_capacity(renders.len());
    for (i, render) in renders.iter().enumerate() {
        let mask = format!("cam{i}_mask.kvnf");
        write_atomic(&out.join(&mask), &Raster::from_mask(&render.mask).to_bytes())?;
        let gt_mask = format!("cam{i}_gt_mask.kvnf");
        write_atomic(
            &out.join(&gt_mask),
            &Raster::from_mask(&render.annotation.gt_mask).to_bytes(),
        )?;
        let mut fields = Vec::with_capacity(render.fields.len());
        for (j, field) in render.fields.iter().enumerate() {
            let name = format!("cam{i}_kp{j}.kvnf");
            write_atomic(
                &out.join(&name),
                &Raster::from_fields(std::slice::from_ref(field))?.to_bytes(),
            )?;
            fields.push(name);
        }
        let annotation = format!("cam{i}_annotation.json");
        write_json(
            &out.join(&annotation),
            &AnnotationFile {
                keypoints2d: render.annotation.keypoints2d.iter().map(|k| [k.x, k.y]).collect(),
                gt_mask,
            },
        )?;
        cameras.push(CameraFiles {
            mask,
            fields,
            annotation,
        });
    }
    let manifest_path = out.join(MANIFEST_FILE);
    write_json(
        &manifest_path,
        &Manifest {
            version: MANIFEST_VERSION,
            scene: SCENE_FILE.into(),
            seed: cfg.seed,
            cameras,
        },
    )?;
    Ok(GenOutput {
        manifest: manifest_path,
        scene: scene_path,
    })
}

/// Voting inputs of one camera as listed in a manifest.
pub struct CameraInputs {
    pub mask: SegMask,
    pub fields: Vec<VectorField>,
}

pub fn load_manifest(path: &Path) -> Result<(Manifest, SceneFile, Vec<CameraInputs>)> {
    let manifest: Manifest = read_json(path)?;
    ensure!(
        manifest.version == MANIFEST_VERSION,
        "unsupported manifest version {}",
        manifest.version
    );
    let dir = base_dir(path);
    let scene: SceneFile = read_json(&dir.join(&manifest.scene))?;
    ensure!(
        manifest.cameras.len() == scene.cameras.len(),
        "manifest lists {} cameras, scene has {}",
        manifest.cameras.len(),
        scene.cameras.len()
    );
    let n = scene.keypoints3d.len();
    let cameras = manifest
        .cameras
        .iter()
        .enumerate()
        .map(|(i, files)| {
            let mask = read_raster(&dir.join(&files.mask))?.to_mask()?;
            let mut fields = Vec::with_capacity(n);
            for name in &files.fields {
                fields.extend(read_raster(&dir.join(name))?.to_fields()?);
            }
            ensure!(
                fields.len() == n,
                "camera {i}: {} fields for {n} keypoints",
                fields.len()
            );
            for f in &fields {
                ensure!(
                    f.width() == mask.width() && f.height() == mask.height(),
                    "camera {i}: field and mask sizes differ"
                );
            }
            Ok(CameraInputs { mask, fields })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scene, cameras))
}

/// Reads the ground truth written next to a manifest.
pub fn load_annotations(path: &Path) -> Result<Vec<GroundTruthAnnotation>> {
    let manifest: Manifest = read_json(path)?;
    let dir = base_dir(path);
    manifest
        .cameras
        .iter()
        .map(|files| {
            let ann: AnnotationFile = read_json(&dir.join(&files.annotation))?;
            Ok(GroundTruthAnnotation {
                keypoints2d: ann.keypoints2d.iter().map(|k| Vector2::from(*k)).collect(),
                gt_mask: read_raster(&dir.join(&ann.gt_mask))?.to_mask()?,
            })
        })
        .collect()
}

/// RANSAC keypoint plus inlier-weighted covariance for every camera and
/// keypoint. Keypoints that cannot be voted for are reported as failures
/// with a `null` observation.
pub fn cmd_vote(cfg: &RunConfig) -> Result<EstimatesFile> {
    let manifest_path = cfg
        .vote
        .manifest
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(MANIFEST_FILE));
    let (_, _, cameras) = load_manifest(&manifest_path)?;
    let v = &cfg.vote;
    ensure!(v.rounds > 0, "rounds must be positive");
    ensure!(v.covariance_pool > 0, "covariance pool must be positive");
    ensure!(
        (-1.0..=1.0).contains(&v.inlier_threshold),
        "inlier threshold must lie in [-1, 1]"
    );

    let jobs: Vec<(usize, usize)> = cameras
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..c.fields.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<std::result::Result<ObservationJson, KvnError>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let cam = &cameras[i];
            let mut rng = rng::stream(cfg.seed, stream_id(i, j, PURPOSE_VOTE));
            let best = ransac_keypoint(&cam.fields[j], &cam.mask, v.rounds, v.inlier_threshold, &mut rng)?;
            let est = keypoint_covariance(
                &best.position,
                &cam.fields[j],
                &cam.mask,
                v.covariance_pool,
                v.inlier_threshold,
                &mut rng,
            )?;
            Ok(ObservationJson::from(&est))
        })
        .collect();

    let mut observations: Vec<Vec<Option<ObservationJson>>> =
        cameras.iter().map(|c| vec![None; c.fields.len()]).collect();
    let mut failures = Vec::new();
    for (&(i, j), res) in jobs.iter().zip(results) {
        match res {
            Ok(obs) => observations[i][j] = Some(obs),
            Err(e) => failures.push(VoteFailure {
                camera: i,
                keypoint: j,
                error: e.to_string(),
            }),
        }
    }
    let estimates = EstimatesFile { observations, failures };
    write_json(&cfg.out_dir.join(ESTIMATES_FILE), &estimates)?;
    Ok(estimates)
}

/// Closed-form initialization from the first camera with enough observations.
pub fn default_initialization(problem: &PnPProblem) -> Result<Pose> {
    match initialize_pose(problem) {
        Err(KvnError::InsufficientObservations { .. }) => {}
        other => return Ok(other?),
    }
    for i in 1..problem.rig().len() {
        match initialize_pose_from_camera(problem, i) {
            Err(KvnError::InsufficientObservations { .. }) => continue,
            other => return Ok(other?),
        }
    }
    bail!("no camera has the four observations needed to initialize the pose")
}

/// Builds the PnP problem (from a problem file, or a scene plus voting
/// estimates) and solves it.
pub fn cmd_solve(cfg: &RunConfig) -> Result<SolutionFile> {
    let s = &cfg.solve;
    let problem = match &s.problem {
        Some(path) => {
            let file: SceneFile = read_json(path)?;
            file.problem()
                .with_context(|| format!("building problem from {}", path.display()))?
        }
        None => {
            let scene_path = s.scene.clone().unwrap_or_else(|| cfg.out_dir.join(SCENE_FILE));
            let est_path = s.estimates.clone().unwrap_or_else(|| cfg.out_dir.join(ESTIMATES_FILE));
            let mut file: SceneFile = read_json(&scene_path)?;
            let estimates: EstimatesFile = read_json(&est_path)?;
            file.observations = Some(estimates.observations);
            file.problem().context("building problem from scene and estimates")?
        }
    };
    let opts = SolverOptions {
        g_tol: s.g_tol,
        x_tol: s.x_tol,
        max_iter: s.max_iter,
    };
    let init = default_initialization(&problem)?;
    let sol = if s.unweighted {
        solve_unweighted(&problem, &init, &opts)?
    } else {
        solve_weighted(&problem, &init, &opts)?
    };
    let file = SolutionFile::new(&sol, !s.unweighted);
    write_json(&cfg.out_dir.join(SOLUTION_FILE), &file)?;
    Ok(file)
}

fn max_pairwise_distance(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm());
        }
    }
    best
}

/// Evaluation sample from a scene with ground truth and a solution. The
/// diameter is taken over the model points when present, else the keypoints.
pub fn eval_sample(scene: &SceneFile, solution: &SolutionFile) -> Result<EvalSample> {
    let gt = scene.gt_pose()?.context("scene has no gt_pose")?;
    let keypoints = scene.keypoints()?;
    let extent: Vec<Vector3<f64>> = match &scene.model_points {
        Some(m) if m.len() >= 2 => m.iter().map(|p| Vector3::from(*p)).collect(),
        _ => keypoints.points().to_vec(),
    };
    let diameter = max_pairwise_distance(&extent);
    Ok(EvalSample::new(
        gt,
        solution.pose()?,
        keypoints,
        scene.symmetric,
        diameter,
    )?)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub curve: Vec<(f64, f64)>,
}

/// Computes the metrics and writes them with the AUC step curve as CSV.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutput> {
    let e = &cfg.eval;
    ensure!(e.max_threshold > 0.0, "max threshold must be positive");
    let samples = match &e.samples {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            kvn_core::io::read_eval_samples(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let (scenes, solutions) = if e.scenes.is_empty() && e.solutions.is_empty() {
                (
                    vec![cfg.out_dir.join(SCENE_FILE)],
                    vec![cfg.out_dir.join(SOLUTION_FILE)],
                )
            } else {
                (e.scenes.clone(), e.solutions.clone())
            };
            ensure!(
                scenes.len() == solutions.len(),
                "{} scenes but {} solutions",
                scenes.len(),
                solutions.len()
            );
            scenes
                .iter()
                .zip(&solutions)
                .map(|(sc, so)| eval_sample(&read_json(sc)?, &read_json(so)?))
                .collect::<Result<Vec<_>>>()?
        }
    };
    ensure!(!samples.is_empty(), "no evaluation samples");

    let mut report = evaluate(&samples);
    let errors: Vec<f64> = samples.iter().map(kvn_core::metrics::keypoint_error).collect();
    report.auc = kvn_core::metrics::auc(&errors, e.max_threshold);
    let curve = auc_curve(&errors, e.max_threshold);

    write_json(&cfg.out_dir.join(METRICS_FILE), &report)?;
    let mut csv = String::from("threshold_m,pass_pct\n");
    for (x, y) in &curve {
        csv.push_str(&format!("{x},{y}\n"));
    }
    write_atomic(&cfg.out_dir.join(CURVE_FILE), csv.as_bytes())?;
    Ok(EvalOutput { report, curve })
}

/// A random loss instance: noisy votes towards random keypoints, a soft mask
/// strictly inside `(0, 1)` and a random binary ground-truth mask.
pub fn random_loss_instance(
    seed: u64,
    width: usize,
    height: usize,
    n_keypoints: usize,
    alpha: f64,
) -> (LossInputs, GroundTruthAnnotation) {
    let mut r = rng::stream(seed, 0);
    let keypoints: Vec<Vector2<f64>> = (0..n_keypoints)
        .map(|_| Vector2::new(r.random_range(0.0..width as f64), r.random_range(0.0..height as f64)))
        .collect();
    let fields = keypoints
        .iter()
        .map(|k| {
            VectorField::from_fn(width, height, |x, y| {
                let d = k - Vector2::new(x as f64, y as f64);
                let dir = d / d.norm().max(1e-3);
                let (s, c) = r.random_range(-0.3f64..0.3).sin_cos();
                Vector2::new(c * dir.x - s * dir.y, s * dir.x + c * dir.y) * r.random_range(0.5..1.5)
            })
        })
        .collect();
    let n = width * height;
    let mask = SegMask::new(width, height, (0..n).map(|_| r.random_range(0.05..0.95)).collect())
        .expect("values inside (0, 1)");
    let gt_mask = SegMask::new(
        width,
        height,
        (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
    )
    .expect("binary values");
    (
        LossInputs { fields, mask, alpha },
        GroundTruthAnnotation {
            keypoints2d: keypoints,
            gt_mask,
        },
    )
}

/// Checks the combined mask + keypoint loss over fields, mask and `α`, and
/// the entropy loss over `α`, on one seeded instance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    let g = &cfg.gradcheck;
    ensure!(g.width >= 2 && g.height >= 2, "gradcheck rasters must be at least 2x2");
    ensure!(
        g.n_keypoints > 0 && g.pool_size > 0,
        "need keypoints and a non-empty pool"
    );
    let sf = g.scoring.build()?;
    let (inputs, annotation) = random_loss_instance(cfg.seed, g.width, g.height, g.n_keypoints, g.alpha);
    let pool = PoolSpec {
        size: g.pool_size,
        seed: cfg.seed,
    };
    let main = check_kvn_loss(&inputs, &annotation, &pool, &sf, g.step)?;

    let mut r = rng::stream(cfg.seed, 1);
    let scores: Vec<f64> = (0..g.pool_size.max(2))
        .map(|_| r.random_range(0.0..(g.width * g.height) as f64))
        .collect();
    let entropy = check_entropy_loss(&scores, g.alpha, g.entropy_target, g.step)?;

    let report = GradCheckReport {
        max_rel_error: main.max_rel_error.max(entropy.max_rel_error),
        checked: main.checked + entropy.checked,
        skipped_kinks: main.skipped_kinks + entropy.skipped_kinks,
    };
    write_json(&cfg.out_dir.join(GRADCHECK_FILE), &report)?;
    Ok(report)
}
