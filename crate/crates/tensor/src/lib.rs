//! Minimal reverse-mode automatic differentiation over dense tensors, with
//! the volumetric operators needed by encoder-decoder segmentation networks.
//!
//! Values live on a [`Graph`] (one per forward pass); parameters live in a
//! [`ParamStore`] and are bound into a graph with [`Graph::param`].

mod graph;
pub mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::{conv3d_output_extent, BatchNormState, Conv3dSpec, ConvTranspose1dSpec};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore};
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::{contiguous_strides, numel, Tensor};

pub use ops::sigmoid;
