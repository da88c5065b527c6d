//! Training, evaluation metrics, dataset splits and experiment drivers.

mod data;
mod metrics;
mod optim;
mod splits;
mod trainer;

pub use data::{
    ring_layout, Clip, Dataset, RawClip, Site, SyntheticRecipe, TargetNorm, Window, DESK_ACTIONS, DESK_LAYOUT_SCALES,
};
pub use metrics::{joint_errors, mpjpe, pck, pck_from_errors, EvalReport, PckEntry, DEFAULT_PCK_THRESHOLDS};
pub use optim::{cosine_lr, Adam, TrainConfig};
pub use splits::{make_splits, Protocol, SampleMeta, SplitSpec};
pub use trainer::{
    evaluate, evaluate_with, export_features, predict, run_ablation, sensitivity_sweep, train_loop, AblationRow,
    EpochLog, FeatureRow, Geometry, Predictions, SweepPoint, Trained,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("held-out id {id} does not occur under protocol {protocol}")]
    UnknownHeldOut { protocol: String, id: usize },
    #[error("missing data: {0}")]
    DataMissing(String),
    #[error("loss diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Sim(#[from] crate::rfsim::RfSimError),
    #[error(transparent)]
    Csi(#[from] crate::csi::CsiError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
