//! File formats: scene/problem JSON, KVNF rasters, estimates, solutions and
//! evaluation samples.
//!
//! The JSON types here are plain serde mirrors of the domain types, with
//! conversions that run the same validation as the domain constructors.

use std::io::{Read, Write};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{KvnError, Result};
use crate::geometry::{CameraIntrinsics, KeypointSet3D, Pose, RigCamera, StereoRig};
use crate::metrics::EvalSample;
use crate::umpnp::{PnPProblem, PnPSolution};
use crate::voting::{KeypointEstimate, SegMask, VectorField};

pub const KVNF_MAGIC: &[u8; 4] = b"KVNF";
pub const KVNF_VERSION: u32 = 1;
const KVNF_HEADER: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJson {
    /// Row-major 3×3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseJson {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseJson {
    pub fn to_pose(&self) -> Result<Pose> {
        Pose::new(Matrix3::from_row_slice(&self.rotation), Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&RigCamera> for CameraJson {
    fn from(c: &RigCamera) -> Self {
        let pose = PoseJson::from(&c.pose);
        let k = &c.intrinsics;
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: pose.rotation,
            translation: pose.translation,
        }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<RigCamera> {
        Ok(RigCamera {
            intrinsics: CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?,
            pose: PoseJson {
                rotation: self.rotation,
                translation: self.translation,
            }
            .to_pose()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationJson {
    pub mean: [f64; 2],
    /// Row-major 2×2.
    pub cov: [f64; 4],
}

impl From<&KeypointEstimate> for ObservationJson {
    fn from(e: &KeypointEstimate) -> Self {
        let c = &e.covariance;
        Self {
            mean: [e.mean.x, e.mean.y],
            cov: [c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]],
        }
    }
}

impl ObservationJson {
    pub fn to_estimate(&self) -> Result<KeypointEstimate> {
        KeypointEstimate::new(Vector2::from(self.mean), Matrix2::from_row_slice(&self.cov))
    }
}

pub type ObservationGrid = Vec<Vec<Option<ObservationJson>>>;

/// Scene description; with `observations` present it is also a PnP problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub cameras: Vec<CameraJson>,
    pub keypoints3d: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<PoseJson>,
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_points: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<ObservationGrid>,
}

impl SceneFile {
    pub fn new(rig: &StereoRig, keypoints: &KeypointSet3D, gt_pose: Option<&Pose>) -> Self {
        Self {
            cameras: rig.cameras().iter().map(CameraJson::from).collect(),
            keypoints3d: keypoints.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            gt_pose: gt_pose.map(PoseJson::from),
            symmetric: false,
            model_points: None,
            observations: None,
        }
    }

    pub fn rig(&self) -> Result<StereoRig> {
        StereoRig::new(self.cameras.iter().map(CameraJson::to_camera).collect::<Result<_>>()?)
    }

    pub fn keypoints(&self) -> Result<KeypointSet3D> {
        KeypointSet3D::new(self.keypoints3d.iter().map(|p| Vector3::from(*p)).collect())
    }

    pub fn gt_pose(&self) -> Result<Option<Pose>> {
        self.gt_pose.as_ref().map(PoseJson::to_pose).transpose()
    }

    /// Builds the PnP problem from the embedded observations.
    pub fn problem(&self) -> Result<PnPProblem> {
        let grid = self
            .observations
            .as_ref()
            .ok_or_else(|| KvnError::Format("problem file has no \"observations\"".into()))?;
        problem_from_grid(self.rig()?, self.keypoints()?, grid)
    }
}

pub fn problem_from_grid(rig: StereoRig, keypoints: KeypointSet3D, grid: &ObservationGrid) -> Result<PnPProblem> {
    let observations = grid
        .iter()
        .map(|row| {
            row.iter()
                .map(|o| o.as_ref().map(ObservationJson::to_estimate).transpose())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    PnPProblem::new(rig, keypoints, observations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteFailure {
    pub camera: usize,
    pub keypoint: usize,
    pub error: String,
}

/// Output of the voting stage: per camera, per keypoint estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatesFile {
    pub observations: ObservationGrid,
    #[serde(default)]
    pub failures: Vec<VoteFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub weighted: bool,
}

impl SolutionFile {
    pub fn new(sol: &PnPSolution, weighted: bool) -> Self {
        let pose = PoseJson::from(&sol.pose);
        Self {
            rotation: pose.rotation,
            translation: pose.translation,
            final_cost: sol.final_cost,
            iterations: sol.iterations,
            converged: sol.converged,
            gradient_norm: sol.gradient_norm,
            weighted,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        PoseJson {
            rotation: self.rotation,
            translation: self.translation,
        }
        .to_pose()
    }
}

/// One line of an evaluation JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSampleJson {
    pub gt_pose: PoseJson,
    pub est_pose: PoseJson,
    pub keypoints3d: Vec<[f64; 3]>,
    #[serde(default)]
    pub symmetric: bool,
    pub diameter: f64,
}

impl From<&EvalSample> for EvalSampleJson {
    fn from(s: &EvalSample) -> Self {
        Self {
            gt_pose: PoseJson::from(&s.gt_pose),
            est_pose: PoseJson::from(&s.est_pose),
            keypoints3d: s.keypoints3d.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            symmetric: s.symmetric,
            diameter: s.diameter,
        }
    }
}

impl EvalSampleJson {
    pub fn to_sample(&self) -> Result<EvalSample> {
        EvalSample::new(
            self.gt_pose.to_pose()?,
            self.est_pose.to_pose()?,
            KeypointSet3D::new(self.keypoints3d.iter().map(|p| Vector3::from(*p)).collect())?,
            self.symmetric,
            self.diameter,
        )
    }
}

/// Parses JSON lines, skipping blank lines; errors name the offending line.
pub fn read_eval_samples(text: &str) -> Result<Vec<EvalSample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let json: EvalSampleJson =
                serde_json::from_str(l).map_err(|e| KvnError::Format(format!("line {}: {e}", n + 1)))?;
            json.to_sample()
        })
        .collect()
}

/// Ground truth of one camera; the mask lives in a separate raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub keypoints2d: Vec<[f64; 2]>,
    pub gt_mask: String,
}

/// Raster file names of one camera, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFiles {
    pub mask: String,
    /// Field rasters in keypoint order. A file may hold several keypoints
    /// (2 channels each); the channel counts must add up to `2·N`.
    pub fields: Vec<String>,
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub scene: String,
    pub seed: u64,
    pub cameras: Vec<CameraFiles>,
}

/// A KVNF raster: row-major `f32` samples with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected || channels == 0 {
            return Err(KvnError::shape(
                format!("{expected} samples ({width}x{height}x{channels})"),
                format!("{}", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(KVNF_HEADER + 4 * self.data.len());
        out.extend_from_slice(KVNF_MAGIC);
        for v in [KVNF_VERSION, self.width, self.height, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < KVNF_HEADER || &bytes[..4] != KVNF_MAGIC {
            return Err(KvnError::Format("not a KVNF raster".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
        let version = word(0);
        if version != KVNF_VERSION {
            return Err(KvnError::Format(format!("unsupported KVNF version {version}")));
        }
        let (width, height, channels) = (word(1), word(2), word(3));
        let count = width as usize * height as usize * channels as usize;
        let body = &bytes[KVNF_HEADER..];
        if body.len() != 4 * count {
            return Err(KvnError::Format(format!(
                "KVNF body has {} bytes, header declares {}",
                body.len(),
                4 * count
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Raster::new(width, height, channels, data)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_mask(mask: &SegMask) -> Self {
        Self {
            width: mask.width() as u32,
            height: mask.height() as u32,
            channels: 1,
            data: mask.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Concatenates fields along the channel axis (2 channels per field).
    pub fn from_fields(fields: &[VectorField]) -> Result<Self> {
        let first = fields.first().ok_or_else(|| KvnError::invalid("no fields to write"))?;
        let (w, h) = (first.width(), first.height());
        if fields.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(KvnError::invalid("fields differ in size"));
        }
        let mut data = Vec::with_capacity(w * h * 2 * fields.len());
        for p in 0..w * h {
            for f in fields {
                let v = f.data()[p];
                data.push(v.x as f32);
                data.push(v.y as f32);
            }
        }
        Raster::new(w as u32, h as u32, 2 * fields.len() as u32, data)
    }

    pub fn to_mask(&self) -> Result<SegMask> {
        if self.channels != 1 {
            return Err(KvnError::Format(format!("mask raster has {} channels", self.channels)));
        }
        SegMask::new(
            self.width as usize,
            self.height as usize,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_fields(&self) -> Result<Vec<VectorField>> {
        if !self.channels.is_multiple_of(2) {
            return Err(KvnError::Format(format!(
                "field raster has an odd channel count {}",
                self.channels
            )));
        }
        let c = self.channels as usize;
        let (w, h) = (self.width as usize, self.height as usize);
        (0..c / 2)
            .map(|k| {
                let data = (0..w * h)
                    .map(|p| Vector2::new(self.data[p * c + 2 * k] as f64, self.data[p * c + 2 * k + 1] as f64))
                    .collect();
                VectorField::new(w, h, data)
            })
            .collect()
    }
}
