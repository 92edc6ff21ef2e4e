//! Differentiable operations, implemented as methods on [`Graph`].

mod conv;
mod elementwise;
mod fuse;
mod linear;
mod norm;
mod pool;
mod resample;
mod shape;

pub use conv::{conv3d_output_extent, Conv3dSpec, ConvTranspose1dSpec};
pub use elementwise::sigmoid;
pub use norm::BatchNormState;
pub use resample::linear_taps;

use std::sync::Arc;

use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// Record `value` as the result of an op over `parents`. The backward
    /// closure is only built when a parent needs a gradient; it receives the
    /// shared output value.
    pub fn emit<F, B>(&self, value: Tensor<T>, parents: &[Var], make_backward: F) -> Var
    where
        F: FnOnce(Arc<Tensor<T>>) -> B,
        B: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let value = Arc::new(value);
        if value.is_meta() || !self.tracks(parents) {
            return self.record_constant(value);
        }
        let backward = make_backward(Arc::clone(&value));
        self.record(value, parents, Box::new(backward))
    }

    pub(crate) fn any_meta(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.is_meta(v))
    }
}
