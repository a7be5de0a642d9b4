//! Dense `f64` tensors with a reverse-mode tape and a finite-difference oracle.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod value;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use tape::{sigmoid, Tape, Var};
pub use value::Tensor;

/// Default layernorm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Bilinear resize of an `[h, w]` plane without recording on a tape.
pub fn resize_plane(data: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    kernels::resize_forward(data, 1, (h, w), (oh, ow))
}

#[cfg(test)]
mod tests;
