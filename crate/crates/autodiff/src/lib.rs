//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The primitive set is deliberately small (add, sub, mul, matmul, relu,
//! softplus, sum, mean, square, sqrt, concat, slice and scalar broadcast, plus
//! the handful of helpers their derivatives need). Backward passes are
//! recorded as tape nodes, which gives mixed second derivatives such as
//! `∂θ (∂x f)` by calling [`Tape::gradient`] twice.
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::scalar(0.5));
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let x2 = tape.square(x).unwrap();
//! let f = tape.mul(w, x2).unwrap();
//! let dfdx = tape.gradient(f, &[x]).unwrap()[0];
//! let mixed = tape.gradient(dfdx, &[w]).unwrap()[0];
//! assert_eq!(tape.value(mixed).item(), Some(4.0));
//! ```

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{gemm, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("gradient needs a single-element output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    ForeignVar,
    #[error("node {0} is not a leaf and cannot be replayed with a new value")]
    NotALeaf(usize),
}
