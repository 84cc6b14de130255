//! Minimal tensor engine with exact forward and backward passes for the
//! fixed MONet topology, plus the Adam optimizer and weight I/O.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod model;
mod scalar;
pub mod tensor;
pub mod weights;

pub use activation::{relu, relu_backward};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use batchnorm::{BatchNorm, BnCache, BnGrads};
pub use conv::{ConvGrads, ConvLayer};
pub use model::{has_skip, skip_layers, ForwardCache, ModelGrads, MonetModel, Phase, DEPTH, DESK_WIDTH, FULL_WIDTH};
pub use scalar::Scalar;
pub use tensor::Tensor4;
pub use weights::{load_weights, read_weights, save_weights, write_weights};
