//! Capsule network: conv base, primary capsules, class capsules with
//! routing-by-agreement, margin loss.

pub mod checkpoint;
pub mod config;
pub mod features;
mod model;

use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_full, save_checkpoint, save_checkpoint_with, Checkpoint, CheckpointError,
};
pub use config::{
    CapsNetConfig, ClassCapsSpec, ConvBaseSpec, ConvLayerSpec, DimensionReport, MarginSpec, PrimaryCapsSpec, VARIANTS,
};
pub use features::{load_feature_file, write_feature_file, FeatureFileError, FeatureMap};
pub use model::{
    capsule_norms, predict_from_norms, route, squash, CapsNet, ForwardOutput, Parameter, Prediction, SampleGradients,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
