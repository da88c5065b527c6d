//! Finite-path CSI forward model and parametric skeleton motion.

mod motion;
mod paths;
mod scene;

pub use motion::{
    bone_pairs, generate_motion, Action, SkeletonTrajectory, JOINT_NAMES, N_JOINTS,
};
pub use paths::{path_params, synth_csi, Path, PathKind};
pub use scene::{perturb_layout, RfScene, StaticScatterer};

use thiserror::Error;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RfSimError {
    #[error("unknown action '{0}'")]
    UnknownAction(String),
    #[error("trajectory would be empty (duration {duration} s at {frame_rate} Hz)")]
    EmptyTrajectory { duration: f64, frame_rate: f64 },
    #[error("frame rate {frame_rate} Hz is not an integer divisor of sample rate {sample_rate} Hz")]
    RateMismatch { frame_rate: f64, sample_rate: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Csi(#[from] crate::csi::CsiError),
}

pub type Result<T> = std::result::Result<T, RfSimError>;
