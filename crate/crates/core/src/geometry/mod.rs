//! Rigid-body algebra, pinhole camera model and the two-board coordinate
//! unification chain that places WiFi transceivers in the vision world frame.

mod camera;
mod transform;
mod unify;

pub use camera::{solve_pnp, triangulate, CameraModel, Distortion, Intrinsics, PnpSolution};
pub use transform::{HomogeneousPoint, RigidTransform, ORTHONORMAL_TOLERANCE};
pub use unify::{
    chain_unify, device_offsets, half_distance, unify_layout, BoardPair, DeviceLayout,
    DistanceMeasurement, UnifyOptions, MIN_DEVICE_SEPARATION,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a proper rotation (det = {det:.6}, orthonormality residual = {residual:.3e})")]
    NonRotation { det: f64, residual: f64 },
    #[error("homogeneous matrix bottom row must be (0, 0, 0, 1)")]
    BadHomogeneousRow,
    #[error("value must be strictly positive, got {0}")]
    NonPositive(f64),
    #[error("point is behind the camera (z = {0:.3e})")]
    BehindCamera(f64),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("solver did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("need at least 2 views to triangulate, got {0}")]
    Underdetermined(usize),
    #[error("rays are nearly parallel (max angle {0:.4} deg)")]
    IllConditioned(f64),
    #[error("transmitter estimates disagree by {spread:.4} m (threshold {threshold:.4} m)")]
    InconsistentTx { spread: f64, threshold: f64 },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid camera parameters: {0}")]
    InvalidCamera(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;
