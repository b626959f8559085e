use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kvn_core::dsac::DEFAULT_ENTROPY_TARGET;
use kvn_core::voting::{ScoringFunction, DEFAULT_COVARIANCE_POOL, DEFAULT_INLIER_THRESHOLD, DEFAULT_RANSAC_ROUNDS};
use serde::{Deserialize, Serialize};

/// Settings of every subcommand. Loaded from one JSON file; unknown keys
/// are rejected and missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub gen: GenConfig,
    pub vote: VoteConfig,
    pub solve: SolveConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            gen: GenConfig::default(),
            vote: VoteConfig::default(),
            solve: SolveConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub width: u32,
    pub height: u32,
    pub n_keypoints: usize,
    pub n_model_points: usize,
    pub stereo: bool,
    pub baseline: f64,
    pub depth: f64,
    pub object_size: f64,
    pub symmetric: bool,
    pub angular_noise_sigma: f64,
    pub outlier_fraction: f64,
    pub mask_flip_fraction: f64,
}

impl Default for GenConfig {
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
            symmetric: false,
            angular_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            mask_flip_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteConfig {
    /// Defaults to `<out_dir>/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub rounds: usize,
    pub covariance_pool: usize,
    pub inlier_threshold: f64,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            rounds: DEFAULT_RANSAC_ROUNDS,
            covariance_pool: DEFAULT_COVARIANCE_POOL,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    /// Scene file with embedded observations. Takes precedence over
    /// `scene` + `estimates`.
    pub problem: Option<PathBuf>,
    /// Defaults to `<out_dir>/scene.json`.
    pub scene: Option<PathBuf>,
    /// Defaults to `<out_dir>/estimates.json`.
    pub estimates: Option<PathBuf>,
    pub unweighted: bool,
    pub g_tol: f64,
    pub x_tol: f64,
    pub max_iter: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        let opts = kvn_core::umpnp::SolverOptions::default();
        Self {
            problem: None,
            scene: None,
            estimates: None,
            unweighted: false,
            g_tol: opts.g_tol,
            x_tol: opts.x_tol,
            max_iter: opts.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// JSON lines of evaluation samples. Takes precedence over scene/solution pairs.
    pub samples: Option<PathBuf>,
    /// Scene files paired index-wise with `solutions`; default one pair from `out_dir`.
    pub scenes: Vec<PathBuf>,
    pub solutions: Vec<PathBuf>,
    pub max_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: None,
            scenes: Vec::new(),
            solutions: Vec::new(),
            max_threshold: kvn_core::metrics::AUC_MAX_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ScoringConfig {
    PiecewiseLinear { t: f64, v: f64 },
    Sigmoid { beta: f64, tau: f64 },
    Heaviside { t: f64 },
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig::PiecewiseLinear { t: 0.9, v: 0.1 }
    }
}

impl ScoringConfig {
    pub fn build(&self) -> kvn_core::Result<ScoringFunction> {
        match *self {
            ScoringConfig::PiecewiseLinear { t, v } => ScoringFunction::piecewise_linear(t, v),
            ScoringConfig::Sigmoid { beta, tau } => ScoringFunction::sigmoid(beta, tau),
            ScoringConfig::Heaviside { t } => ScoringFunction::heaviside(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub width: usize,
    pub height: usize,
    pub n_keypoints: usize,
    pub pool_size: usize,
    pub step: f64,
    pub alpha: f64,
    pub entropy_target: f64,
    pub scoring: ScoringConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            n_keypoints: 2,
            pool_size: 8,
            step: 1e-5,
            alpha: 0.5,
            entropy_target: DEFAULT_ENTROPY_TARGET,
            scoring: ScoringConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_pipeline() {
        let c = RunConfig::default();
        assert_eq!(c.vote.rounds, 256);
        assert_eq!(c.vote.covariance_pool, 1024);
        assert_eq!(c.vote.inlier_threshold, 0.99);
        assert_eq!(c.gradcheck.entropy_target, 6.0);
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "vote": {"rounds": 10}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.vote.rounds, 10);
        assert_eq!(c.vote.covariance_pool, 1024);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"vote": {"round": 3}}"#).is_err());
    }

    #[test]
    fn scoring_config_is_tagged() {
        let s: ScoringConfig = serde_json::from_str(r#"{"kind": "sigmoid", "beta": 20, "tau": 0.9}"#).unwrap();
        assert_eq!(s, ScoringConfig::Sigmoid { beta: 20.0, tau: 0.9 });
        assert!(s.build().is_ok());
    }
}
