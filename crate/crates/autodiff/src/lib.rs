//! Dense tensors, a recording tape, and reverse-mode differentiation.
//!
//! Values are [`Tensor`]s; computations are recorded on a [`Tape`] through
//! [`Var`] handles and differentiated with [`Tape::backward`]. Only
//! scalar-tensor broadcasting is supported: every other shape change must be
//! spelled out with `reshape`, `broadcast_rows` or `concat`.

mod error;
mod gradcheck;
mod ops;
mod primitive;
mod scalar;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_with_floor, GradCheck};
pub use ops::volume::partition_bins;
pub use primitive::Primitive;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Distribution, Init, Tensor};
