//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations on tracked tensors append nodes to a shared [`Tape`]. [`grad`]
//! walks the tape backwards; with `create_graph` the backward pass is itself
//! recorded, which is what makes differentiating through an SGD step
//! possible.

mod backward;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::{sigmoid, Op};
pub use params::ParamSet;
pub use tape::{grad, Tape};
pub use tensor::Tensor;

/// Forward evaluation of `op` on `inputs`, recorded when any input is tracked.
pub fn forward_op(op: Op, inputs: &[&Tensor]) -> crate::Result<Tensor> {
    Tensor::apply(op, inputs)
}

#[cfg(test)]
mod tests;
