//! Dense tensors, the differentiation tape and its finite-difference oracle.

mod gradcheck;
pub(crate) mod kernels;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, check_param_gradients, finite_diff_gradient, max_relative_error, REL_ERR_FLOOR,
};
pub use kernels::sigmoid;
pub use param::{ParamVisitor, Parameter};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests;
