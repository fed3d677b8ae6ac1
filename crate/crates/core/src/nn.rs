//! Small convolutional networks with hand-written backpropagation.
//!
//! Activations are `H x T x C` tensors (feature rows, frames, channels). Fully
//! connected layers are 1x1 convolutions on `1 x 1 x C` tensors, so every
//! layer shares the same convolution, SELU and batch-norm code.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod optim;
pub mod tensor;

pub use layers::{selu, selu_grad, Mode, SELU_ALPHA, SELU_LAMBDA};
pub use network::{
    gradcheck, Batch, ForwardOutput, GradcheckReport, Gradients, LayerShape, Network, NetworkSpec, NetworkState,
    Param, Variant,
};
pub use optim::{adam_step, AdamConfig};
pub use tensor::Tensor3;
