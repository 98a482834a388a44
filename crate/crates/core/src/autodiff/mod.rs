//! Minimal reverse-mode automatic differentiation over small dense tensors.
//!
//! Every trainable loss in the crate is built on a [`Graph`]: leaves are
//! created with [`Graph::param`] or [`Graph::constant`], operations append
//! nodes, and [`Graph::backward`] returns gradients for every trainable leaf.
//! The graph is rebuilt for each training step.
//!
//! ```
//! use pointobb::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_default, GradCheckReport, DEFAULT_EPS};
pub(crate) use graph::{cosine_row, softmax_raw};
pub use graph::{sigmoid, smooth_l1, Gradients, Graph, SparseRows, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("function value is not finite at the check point")]
    NonFiniteObjective,
}

#[cfg(test)]
mod tests;
