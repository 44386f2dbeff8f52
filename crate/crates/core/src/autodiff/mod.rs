//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Values flow through it as
//! [`Var`]s; parameters live in a [`ParamStore`] and are bound to the tape with
//! [`Tape::param`]. [`Tape::backward`] sweeps the records once in reverse and
//! returns [`Gradients`], which [`ParamStore::accumulate`] adds into the
//! gradient slots (accumulation is additive until [`ParamStore::zero_grad`]).

pub mod check;
pub mod kernels;
mod ops;
mod param;
mod tape;
mod tensor;

pub use param::{Param, ParamId, ParamStore};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
