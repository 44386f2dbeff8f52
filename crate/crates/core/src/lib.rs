//! Latent Neural ODE models for video reconstruction, extrapolation and
//! temporal interpolation.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the 64-bit instantiation used for training.

pub mod autodiff;
pub mod data;
mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ode;
mod scalar;
pub mod train;

pub use autodiff::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type TimeGrid64 = ode::TimeGrid<f64>;
pub type SolverConfig64 = ode::SolverConfig<f64>;

pub type Model64 = models::Model<f64>;
