//! Differentiable tensor core.
//!
//! [`Tensor`] is the value type, [`Graph`] records operations for reverse
//! mode differentiation, and [`finite_diff_check`] verifies gradients
//! numerically. The free functions below evaluate a single op eagerly.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod real;
mod tensor;

pub use gradcheck::{check_analytic, finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

use crate::error::Result;

fn eager<T: Real>(inputs: &[&Tensor<T>], f: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    eager(&[a, b], |g, v| g.matmul(v[0], v[1]))
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    eager(&[x], |g, v| g.softmax(v[0], axis))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    eager(&[x], |g, v| g.relu(v[0]))
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    eager(&[x, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], eps))
}

/// Mean cross-entropy of `targets` under `softmax(logits)`, returned as a scalar.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    eager(&[logits], |g, v| g.cross_entropy(v[0], targets)).map(|t| t.data()[0])
}
