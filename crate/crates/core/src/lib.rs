//! Geometric core of a stereo keypoint-voting pose estimator.
//!
//! * [`geometry`]: pinhole cameras, rigid poses, stereo rigs.
//! * [`voting`]: hypotheses from pixel votes, soft-inlier scoring, RANSAC.
//! * [`dsac`]: expected keypoint loss, mask and entropy losses with analytic gradients.
//! * [`gradcheck`]: finite-difference verification of those gradients.
//! * [`umpnp`]: covariance-weighted multi-view PnP.
//! * [`metrics`]: ADD(-S), <2cm, AUC and MAE.
//! * [`synth`]: synthetic scenes standing in for a trained network.
//! * [`io`]: scene, problem and raster file formats.

pub mod dsac;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod umpnp;
pub mod voting;

pub use error::{KvnError, Result};
