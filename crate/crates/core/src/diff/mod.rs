//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitive applications in order; [`Tape::backward`]
//! walks it once in reverse. Parameters live in a [`ParamStore`] and are
//! pulled onto a tape with [`Tape::param`]; their gradients accumulate with
//! `+=` until the optimizer zeroes them.

mod check;
mod param;
mod tape;
mod tensor;

pub use check::grad_check;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NodeId, Primitive, Tape};
pub use tensor::Tensor;
