//! Real-time human motion capture fusing sparse IMUs with monocular 2D keypoints.
//!
//! The engine estimates per-frame body pose (joint rotations) and global
//! translation by running two estimation branches in parallel: one in the body
//! root coordinate system (IMU only) and one in the camera coordinate system
//! (IMU + 2D keypoints). Per-frame fusion is driven by the mean keypoint
//! confidence, translation is tracked with a complementary filter over an
//! IMU-derived velocity and a directly regressed camera-frame position, and an
//! optional one-iteration energy minimization refines the final pose and
//! translation. The recurrent branches exchange information through an
//! explicit hidden-state feedback mechanism.
//!
//! All sensor streams here are synthesized from ground-truth motion sequences;
//! see [`sensors`] for the dataset format and the procedural motion generator.

pub mod config;
pub mod estimator;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod sensors;
pub mod skeleton;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// 6D rotation input whose columns cannot be orthonormalized.
    #[error("degenerate 6D rotation input: {0}")]
    DegenerateInput(String),
    /// T-pose calibration left a sensor with too large a residual.
    #[error("calibration failure: sensor {sensor} residual {residual_deg:.2} deg exceeds {limit_deg:.2} deg")]
    CalibrationFailure {
        sensor: usize,
        residual_deg: f64,
        limit_deg: f64,
    },
    /// Point at or behind the projection plane.
    #[error("point behind camera: z = {0}")]
    BehindCamera(f64),
    /// Vector or state dimension does not match the expected layout.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    /// A loss or objective evaluated to NaN/inf.
    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),
    /// Sequences of different lengths passed to a paired metric.
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    /// Input violated a documented operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A checkpoint file or bundle directory is absent.
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    /// Malformed dataset, checkpoint or config content.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
