//! Minimal tensor engine with reverse-mode autodiff, and the pose network:
//! shared conv encoder, pre-LN transformer and MLP pose head.

mod gradcheck;
mod graph;
mod model;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{gelu_scalar, ConvGeom, Gradients, Graph, Var, LN_EPS};
pub use model::{
    conv_encoder, pose_head, transformer_forward, transformer_layer, Batch, LayerIds, Mode, Model, ModelConfig, ModelIds,
};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing token for receiver {receiver}, frame {frame}")]
    MissingToken { receiver: usize, frame: usize },
}

pub type Result<T> = std::result::Result<T, NetError>;
