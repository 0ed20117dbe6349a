//! Minimal differentiable tensor engine.
//!
//! Networks are DAGs of a handful of layer kinds (convolution, 2x max
//! pooling, 2x upsampling, ReLU, channel concatenation, linear) executed on
//! NCHW tensors. A training forward pass records activations that
//! [`Network::backward`] consumes to produce parameter and input gradients.

pub mod checkpoint;
mod error;
mod layer;
pub mod loss;
mod network;
mod ops;
mod optim;
mod real;
mod tensor;

pub use error::{NnError, Result};
pub use layer::{conv_out_extent, LayerKind};
pub use network::{Gradients, GraphBuilder, Network, NetworkSpec, NodeSpec, Source, Value};
pub use optim::{Adam, Optimizer, OptimizerConfig, Sgd};
pub use real::Real;
pub use tensor::Tensor;
