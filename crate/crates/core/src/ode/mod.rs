//! Initial value problems over learned dynamics.
//!
//! [`integrate`] evaluates `(ξ_0, …, ξ_n)` on a monotone [`TimeGrid`] with a
//! fixed-step (Euler, RK4) or adaptive Dormand–Prince 5(4) scheme. Gradients
//! come either from the adjoint system solved backward in time
//! ([`integrate_adjoint`]) or from recording every solver operation on the tape
//! ([`integrate_backprop`]). [`integrate_tracked`] picks one of the two and
//! plugs the trajectory into an enclosing forward pass.

mod adjoint;
mod solver;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub use adjoint::{integrate_adjoint, integrate_tracked};

/// Right-hand side `dξ/dt = f(ξ, t; θ)`.
///
/// `params` holds θ as bound variables, in the order the implementation
/// expects. The output must have the state's shape, and evaluation must be
/// pure in `(state, t, params)`.
pub trait Dynamics<T: Real> {
    fn eval<'t>(&self, params: &[Var<'t, T>], state: &Var<'t, T>, t: T) -> Result<Var<'t, T>>;
}

impl<T: Real, D: Dynamics<T> + ?Sized> Dynamics<T> for &D {
    fn eval<'t>(&self, params: &[Var<'t, T>], state: &Var<'t, T>, t: T) -> Result<Var<'t, T>> {
        (**self).eval(params, state, t)
    }
}

/// Strictly monotone, finite sequence of times.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<T>(Vec<T>);

impl<T: Real> TimeGrid<T> {
    pub fn new(times: Vec<T>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("time grid must contain at least one time"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("time grid contains a non-finite value"));
        }
        let increasing = times.windows(2).all(|w| w[1] > w[0]);
        let decreasing = times.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(Error::invalid("time grid must be strictly monotone"));
        }
        Ok(TimeGrid(times))
    }

    /// `0, 1, …, n − 1`.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| T::of(i as f64)).collect())
    }

    pub fn times(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> T {
        self.0[0]
    }

    pub fn last(&self) -> T {
        self.0[self.0.len() - 1]
    }

    pub fn reversed(&self) -> Self {
        TimeGrid(self.0.iter().rev().copied().collect())
    }

    /// Position of an exact grid time.
    pub fn position(&self, t: T) -> Option<usize> {
        self.0.iter().position(|&s| s == t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            other => Err(Error::invalid(format!(
                "unknown solver method {other:?} (expected euler, rk4 or dopri5)"
            ))),
        }
    }
}

/// How gradients of a trajectory are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    Adjoint,
    Backprop,
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientMode::Adjoint => "adjoint",
            GradientMode::Backprop => "backprop",
        })
    }
}

impl FromStr for GradientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjoint" => Ok(GradientMode::Adjoint),
            "backprop" => Ok(GradientMode::Backprop),
            other => Err(Error::invalid(format!(
                "unknown gradient mode {other:?} (expected adjoint or backprop)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig<T> {
    pub method: Method,
    /// Step size of the fixed-step methods, in time units.
    pub step: T,
    pub rtol: T,
    pub atol: T,
    /// Attempted steps allowed per grid segment.
    pub max_steps: usize,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dopri5,
            step: T::of(0.1),
            rtol: T::of(1e-5),
            atol: T::of(1e-7),
            max_steps: 100_000,
        }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            rtol: T::of(rtol),
            atol: T::of(atol),
            ..Self::default()
        }
    }

    pub fn fixed(method: Method, step: f64) -> Self {
        SolverConfig {
            method,
            step: T::of(step),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !pos(self.step) {
            return Err(Error::invalid("solver step must be positive"));
        }
        if !pos(self.rtol) || !pos(self.atol) {
            return Err(Error::invalid("solver rtol and atol must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("solver max_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Solves the initial value problem on `grid`; returns `[n + 1, ...state shape]`
/// whose row 0 is `x0` exactly.
pub fn integrate<T: Real, F: Dynamics<T>>(
    f: &F,
    params: &[Tensor<T>],
    x0: &Tensor<T>,
    grid: &TimeGrid<T>,
    cfg: &SolverConfig<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let theta: Vec<Var<'_, T>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let states = solver::solve(f, &theta, &tape.constant(x0.clone()), grid, cfg)?;
    let values: Vec<Tensor<T>> = states.into_iter().map(|v| v.value).collect();
    Tensor::stack(&values)
}

/// Like [`integrate`], but every solver operation is recorded on the tape of
/// `x0`, so ordinary backpropagation differentiates the discrete scheme.
pub fn integrate_backprop<'t, T: Real, F: Dynamics<T>>(
    f: &F,
    params: &[Var<'t, T>],
    x0: &Var<'t, T>,
    grid: &TimeGrid<T>,
    cfg: &SolverConfig<T>,
) -> Result<Var<'t, T>> {
    let states = solver::solve(f, params, x0, grid, cfg)?;
    Var::stack(&states)
}

#[cfg(test)]
mod tests;
