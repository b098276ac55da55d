//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, DEFAULT_H};
pub use graph::{Graph, TensorId};
pub use kernels::BilinearTap;
pub use params::{init_conv1x1, init_conv3x3, uniform_tensor, ParamId, ParamStore, Sgd};
pub use tensor::Tensor;

#[cfg(test)]
mod graph_tests;
