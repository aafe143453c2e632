//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Leaves
//! created with [`Tape::param`] track gradients; leaves created with
//! [`Tape::constant`] do not, and nothing downstream of constants alone
//! accumulates gradient either. [`Tape::backward`] walks the record in
//! reverse (which is a reverse topological order, since a node can only
//! reference earlier nodes) and returns the gradients of every tracked leaf.
//!
//! The tape is single-threaded. Data-parallel training builds one tape per
//! worker and sums the resulting [`Gradients`].
//!
//! [`Tensor`]: crate::tensor::Tensor

mod ops;
mod tape;

pub use ops::CustomOp;
pub use tape::{Gradients, Tape, Var};
