//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine records every operation on an append-only tape owned by a
//! [`Graph`]. A [`Value`] is a cheap handle to one tape entry. Calling
//! [`Value::backward`] on a scalar sweeps the tape once in reverse order,
//! accumulating gradients into every node that requires them. Gradients add
//! up across repeated backward calls until explicitly cleared.
//!
//! Determinism: identical graphs over identical inputs produce
//! bitwise-identical forward values and gradients; all kernels are
//! sequential with a fixed accumulation order.

mod checkpoint;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use checkpoint::{read_archive, write_archive, ARCHIVE_MAGIC};
pub use gradcheck::{grad_check, GradCheck};
pub use graph::{concat, CustomOp, Graph, Value};
pub use params::{BoundParams, ParamSet};
pub use tensor::{strides_of, Tensor};

/// Scalar activations shared by graph kernels and custom ops so both sides
/// compute bit-identical values.
pub(crate) use graph::{sigmoid as sigmoid_f64, softplus as softplus_f64};

use thiserror::Error;

/// Errors raised by tensor construction, graph ops, and checkpoint IO.
#[derive(Debug, Error)]
pub enum DiffError {
    /// A tensor was constructed with inconsistent shape/data.
    #[error("bad shape: {what}")]
    BadShape { what: String },
    /// Operand shapes are incompatible for an op.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// An op produced a NaN or infinity (overflow is an error, never a
    /// silent value).
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    /// A scalar was required (e.g. the root of a backward sweep).
    #[error("expected a scalar value, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    /// Two values from different graphs were combined.
    #[error("values belong to different graphs")]
    GraphMismatch,
    /// An op would produce (or consumed) a zero-element tensor.
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A serialized archive or record failed validation.
    #[error("format error: {what}")]
    Format { what: String },
}
