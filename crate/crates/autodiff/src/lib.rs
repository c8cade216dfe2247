//! Reverse-mode automatic differentiation over static graphs of `[C, H, W]` tensors.
//!
//! A [`Graph`] is built once with shape checking at every node; an [`Executor`] binds
//! inputs and parameters, runs the forward pass and then propagates cotangents back in
//! reverse topological order. The op set covers what small convolutional
//! encoder-decoders with Fourier-domain layers need: strided and transposed
//! convolutions, instance normalization, pointwise nonlinearities, unitary 2D DFTs on a
//! two-plane complex representation, and a per-row k-space mixing node.

mod error;
mod exec;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod real;
mod tensor;

pub use error::{AutodiffError, Result};
pub use exec::{Executor, Gradients};
pub use graph::{Graph, NodeId, OpKind};
pub use kernels::Padding;
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::ParamSet;
pub use real::{dft2_planes, matmul, Real};
pub use tensor::Tensor;
