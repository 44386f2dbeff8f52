use std::rc::Rc;

use super::{
    integrate, integrate_backprop, solver, Dynamics, GradientMode, SolverConfig, TimeGrid,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Augmented backward system over the flat state `[ξ, a, g_θ]`:
/// `dξ/dt = f`, `da/dt = −aᵀ ∂f/∂ξ`, `dg_θ/dt = −aᵀ ∂f/∂θ`.
struct Augmented<'a, T, F> {
    f: &'a F,
    params: &'a [Tensor<T>],
    state_shape: &'a [usize],
}

impl<T: Real, F: Dynamics<T>> Dynamics<T> for Augmented<'_, T, F> {
    fn eval<'t>(&self, _params: &[Var<'t, T>], aug: &Var<'t, T>, t: T) -> Result<Var<'t, T>> {
        let d: usize = self.state_shape.iter().product();
        let flat = aug.value().data();
        let xi = Tensor::new(self.state_shape, flat[..d].to_vec())?;
        let adj = Tensor::new(self.state_shape, flat[d..2 * d].to_vec())?;

        let inner = Tape::new();
        let xi_v = inner.leaf(xi);
        let theta: Vec<Var<'_, T>> = self.params.iter().map(|p| inner.leaf(p.clone())).collect();
        let dxi = self.f.eval(&theta, &xi_v, t)?;
        let mut out = Vec::with_capacity(flat.len());
        out.extend_from_slice(dxi.value().data());

        let vjp = dxi.mul(&inner.constant(adj))?.sum();
        if vjp.is_tracked() {
            let grads = inner.backward(&vjp)?;
            out.extend(grads.wrt(&xi_v).data().iter().map(|&v| -v));
            for th in &theta {
                out.extend(grads.wrt(th).data().iter().map(|&v| -v));
            }
        } else {
            out.resize(flat.len(), T::zero());
        }
        Ok(aug.tape().constant(Tensor::from_vec(out)))
    }
}

/// Gradients `(dL/dξ_0, dL/dθ)` from the adjoint system solved backward over
/// `grid`.
///
/// `path` holds the forward states `[n + 1, ...]` and `loss_grads[i]` is
/// `dL/dξ(t_i)`, injected into the adjoint at each observation time while the
/// replayed state is reset to the stored forward value.
pub fn integrate_adjoint<T: Real, F: Dynamics<T>>(
    f: &F,
    params: &[Tensor<T>],
    path: &Tensor<T>,
    grid: &TimeGrid<T>,
    loss_grads: &[Tensor<T>],
    cfg: &SolverConfig<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let n = grid.len();
    if loss_grads.len() != n {
        return Err(Error::invalid(format!(
            "missing loss gradient: {} supplied for {} observation times",
            loss_grads.len(),
            n
        )));
    }
    if path.shape().first() != Some(&n) {
        return Err(Error::Shape {
            op: "integrate_adjoint path",
            lhs: vec![n],
            rhs: path.shape().to_vec(),
        });
    }
    let state_shape = &path.shape()[1..];
    for g in loss_grads {
        if g.shape() != state_shape {
            return Err(Error::Shape {
                op: "integrate_adjoint loss gradient",
                lhs: state_shape.to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let d: usize = state_shape.iter().product();
    let p: usize = params.iter().map(Tensor::len).sum();
    let aug_f = Augmented {
        f,
        params,
        state_shape,
    };
    let times = grid.times();
    let mut adj = loss_grads[n - 1].data().to_vec();
    let mut g_theta = vec![T::zero(); p];
    let tape = Tape::inference();
    for i in (1..n).rev() {
        let mut aug = Vec::with_capacity(2 * d + p);
        aug.extend_from_slice(path.row(i).data());
        aug.extend_from_slice(&adj);
        aug.extend_from_slice(&g_theta);
        let seg = TimeGrid::new(vec![times[i], times[i - 1]])?;
        let states = solver::solve(
            &aug_f,
            &[],
            &tape.constant(Tensor::from_vec(aug)),
            &seg,
            cfg,
        )?;
        let end = states.last().expect("two grid points").value().data();
        adj.copy_from_slice(&end[d..2 * d]);
        g_theta.copy_from_slice(&end[2 * d..]);
        for (a, &l) in adj.iter_mut().zip(loss_grads[i - 1].data()) {
            *a += l;
        }
    }
    let grad_x0 = Tensor::new(state_shape, adj)?;
    let mut grads = Vec::with_capacity(params.len());
    let mut off = 0;
    for prm in params {
        grads.push(Tensor::new(
            prm.shape(),
            g_theta[off..off + prm.len()].to_vec(),
        )?);
        off += prm.len();
    }
    Ok((grad_x0, grads))
}

/// Trajectory `[n + 1, ...]` from `x0`, differentiable with respect to `x0`
/// and `params` by the chosen [`GradientMode`].
pub fn integrate_tracked<'t, T, F>(
    f: &F,
    params: &[Var<'t, T>],
    x0: &Var<'t, T>,
    grid: &TimeGrid<T>,
    cfg: &SolverConfig<T>,
    mode: GradientMode,
) -> Result<Var<'t, T>>
where
    T: Real,
    F: Dynamics<T> + Clone + 'static,
{
    let tape = x0.tape();
    let tracked = tape.is_recording() && (x0.is_tracked() || params.iter().any(Var::is_tracked));
    if mode == GradientMode::Backprop && tracked {
        return integrate_backprop(f, params, x0, grid, cfg);
    }
    let theta: Vec<Tensor<T>> = params.iter().map(|v| v.value().clone()).collect();
    let path = integrate(f, &theta, x0.value(), grid, cfg)?;
    if !tracked {
        return Ok(tape.constant(path));
    }
    let (f, grid, cfg) = (f.clone(), grid.clone(), cfg.clone());
    let saved = path.clone();
    let backward = Rc::new(move |g: &Tensor<T>| -> Result<Vec<Tensor<T>>> {
        let loss_grads: Vec<Tensor<T>> = (0..grid.len()).map(|i| g.row(i)).collect();
        let (gx0, gtheta) = integrate_adjoint(&f, &theta, &saved, &grid, &loss_grads, &cfg)?;
        let mut out = vec![gx0];
        out.extend(gtheta);
        Ok(out)
    });
    let mut inputs = vec![x0];
    inputs.extend(params.iter());
    Ok(tape.custom(&inputs, path, backward))
}
