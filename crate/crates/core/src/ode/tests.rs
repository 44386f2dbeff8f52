use super::*;
use crate::autodiff::Tape;

#[derive(Clone)]
struct Zero;
impl Dynamics<f64> for Zero {
    fn eval<'t>(&self, _p: &[Var<'t, f64>], y: &Var<'t, f64>, _t: f64) -> Result<Var<'t, f64>> {
        Ok(y.tape().constant(Tensor::zeros(y.shape())))
    }
}

#[derive(Clone)]
struct Growth;
impl Dynamics<f64> for Growth {
    fn eval<'t>(&self, _p: &[Var<'t, f64>], y: &Var<'t, f64>, _t: f64) -> Result<Var<'t, f64>> {
        Ok(y.clone())
    }
}

/// `(ξ₁, ξ₂) ↦ (ξ₂, −ξ₁)`.
#[derive(Clone)]
struct Rotation;
impl Dynamics<f64> for Rotation {
    fn eval<'t>(&self, _p: &[Var<'t, f64>], y: &Var<'t, f64>, _t: f64) -> Result<Var<'t, f64>> {
        let m = y
            .tape()
            .constant(Tensor::from_f64(&[2, 2], &[0.0, -1.0, 1.0, 0.0])?);
        y.reshape(&[1, 2])?.matmul(&m)?.reshape(&[2])
    }
}

/// `f(ξ) = θ·ξ` with scalar θ.
#[derive(Clone)]
struct Linear;
impl Dynamics<f64> for Linear {
    fn eval<'t>(&self, p: &[Var<'t, f64>], y: &Var<'t, f64>, _t: f64) -> Result<Var<'t, f64>> {
        y.mul(&p[0])
    }
}

fn grid(ts: &[f64]) -> TimeGrid<f64> {
    TimeGrid::new(ts.to_vec()).unwrap()
}

fn one(v: f64) -> Tensor<f64> {
    Tensor::from_vec(vec![v])
}

#[test]
fn time_grid_validation() {
    assert!(TimeGrid::<f64>::new(vec![]).is_err());
    assert!(TimeGrid::new(vec![0.0, 0.0]).is_err());
    assert!(TimeGrid::new(vec![0.0, 1.0, 0.5]).is_err());
    assert!(TimeGrid::new(vec![0.0, f64::NAN]).is_err());
    assert!(TimeGrid::new(vec![2.0, 1.0, 0.0]).is_ok());
    assert!(TimeGrid::new(vec![3.0]).is_ok());
}

#[test]
fn zero_dynamics_keep_state() {
    let v = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
    for cfg in [
        SolverConfig::dopri5(1e-6, 1e-8),
        SolverConfig::fixed(Method::Rk4, 0.3),
        SolverConfig::fixed(Method::Euler, 0.3),
    ] {
        let out = integrate(&Zero, &[], &v, &grid(&[0.0, 0.7, 2.0, 5.0]), &cfg).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        for i in 0..4 {
            assert_eq!(out.row(i), v);
        }
    }
}

#[test]
fn dopri5_exponential() {
    let out = integrate(
        &Growth,
        &[],
        &one(1.0),
        &grid(&[0.0, 1.0]),
        &SolverConfig::dopri5(1e-8, 1e-8),
    )
    .unwrap();
    assert_eq!(out.data()[0], 1.0);
    assert!((out.data()[1] - std::f64::consts::E).abs() < 1e-6);
}

#[test]
fn dopri5_rotation_period() {
    let x0 = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
    let tau = 2.0 * std::f64::consts::PI;
    let out = integrate(
        &Rotation,
        &[],
        &x0,
        &grid(&[0.0, tau]),
        &SolverConfig::dopri5(1e-8, 1e-8),
    )
    .unwrap();
    let end = out.row(1);
    assert!((end.data()[0] - 1.0).abs() < 1e-5 && end.data()[1].abs() < 1e-5);
}

#[test]
fn decreasing_grid_runs_backward() {
    let out = integrate(
        &Growth,
        &[],
        &one(1.0),
        &grid(&[1.0, 0.0]),
        &SolverConfig::dopri5(1e-9, 1e-9),
    )
    .unwrap();
    assert!((out.data()[1] - (-1.0f64).exp()).abs() < 1e-7);
}

#[test]
fn one_euler_step_is_exact() {
    let h = 0.125;
    let cfg = SolverConfig::fixed(Method::Euler, h);
    let out = integrate(&Growth, &[], &one(3.0), &grid(&[0.0, h]), &cfg).unwrap();
    assert_eq!(out.data()[1], 3.0 * (1.0 + h));
}

#[test]
fn convergence_orders() {
    let err = |method, h| {
        let out = integrate(
            &Growth,
            &[],
            &one(1.0),
            &grid(&[0.0, 1.0]),
            &SolverConfig::fixed(method, h),
        )
        .unwrap();
        (out.data()[1] - std::f64::consts::E).abs()
    };
    let euler = err(Method::Euler, 0.1) / err(Method::Euler, 0.05);
    let rk4 = err(Method::Rk4, 0.1) / err(Method::Rk4, 0.05);
    assert!((1.8..=2.2).contains(&euler), "euler ratio {euler}");
    assert!((12.0..=20.0).contains(&rk4), "rk4 ratio {rk4}");
}

#[test]
fn grid_consistency() {
    let (rtol, atol) = (1e-6, 1e-8);
    let cfg = SolverConfig::dopri5(rtol, atol);
    let x0 = Tensor::from_f64(&[2], &[0.3, -1.2]).unwrap();
    let direct = integrate(&Rotation, &[], &x0, &grid(&[0.0, 2.5]), &cfg)
        .unwrap()
        .row(1);
    let first = integrate(&Rotation, &[], &x0, &grid(&[0.0, 1.1]), &cfg)
        .unwrap()
        .row(1);
    let handoff = integrate(&Rotation, &[], &first, &grid(&[1.1, 2.5]), &cfg)
        .unwrap()
        .row(1);
    for (a, b) in direct.data().iter().zip(handoff.data()) {
        assert!((a - b).abs() <= 10.0 * (atol + rtol * a.abs()));
    }
}

#[test]
fn reversibility() {
    let rtol = 1e-7;
    let cfg = SolverConfig::dopri5(rtol, 1e-9);
    let x0 = Tensor::from_f64(&[2], &[0.8, 0.1]).unwrap();
    let fwd = integrate(&Rotation, &[], &x0, &grid(&[0.0, 1.0, 3.0]), &cfg)
        .unwrap()
        .row(2);
    let back = integrate(&Rotation, &[], &fwd, &grid(&[3.0, 1.0, 0.0]), &cfg)
        .unwrap()
        .row(2);
    for (a, b) in back.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 100.0 * rtol);
    }
}

#[test]
fn step_limit_reported() {
    let mut cfg = SolverConfig::fixed(Method::Rk4, 1e-3);
    cfg.max_steps = 10;
    let e = integrate(&Growth, &[], &one(1.0), &grid(&[0.0, 1.0]), &cfg).unwrap_err();
    assert!(matches!(e, Error::StepLimit { .. }));
    let mut cfg = SolverConfig::dopri5(1e-12, 1e-12);
    cfg.max_steps = 3;
    assert!(integrate(&Growth, &[], &one(1.0), &grid(&[0.0, 10.0]), &cfg).is_err());
}

#[test]
fn non_finite_initial_state_rejected() {
    let e = integrate(
        &Growth,
        &[],
        &one(f64::NAN),
        &grid(&[0.0, 1.0]),
        &SolverConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(e, Error::NonFinite(_)));
}

#[test]
fn adjoint_unused_parameter_has_zero_gradient() {
    let theta = vec![Tensor::from_vec(vec![0.7, -0.3])];
    let x0 = one(1.0);
    let g = grid(&[0.0, 0.5, 1.0]);
    let cfg = SolverConfig::dopri5(1e-8, 1e-10);
    let path = integrate(&Growth, &theta, &x0, &g, &cfg).unwrap();
    let lg = vec![one(0.0), one(1.0), one(2.0)];
    let (gx0, gth) = integrate_adjoint(&Growth, &theta, &path, &g, &lg, &cfg).unwrap();
    assert!(gth[0].data().iter().all(|&v| v == 0.0));
    // L = ξ(0.5) + 2ξ(1) with ξ(t) = ξ0·eᵗ.
    let expect = 0.5f64.exp() + 2.0 * 1.0f64.exp();
    assert!((gx0.item() - expect).abs() < 1e-6);
}

#[test]
fn adjoint_linear_closed_form() {
    // ξ(T) = ξ0·e^{θT}; dξ(T)/dθ = ξ0·T·e^{θT} = 1 at θ = 0, T = 1.
    let theta = vec![one(0.0)];
    let g = grid(&[0.0, 1.0]);
    let cfg = SolverConfig::dopri5(1e-8, 1e-10);
    let path = integrate(&Linear, &theta, &one(1.0), &g, &cfg).unwrap();
    let (gx0, gth) =
        integrate_adjoint(&Linear, &theta, &path, &g, &[one(0.0), one(1.0)], &cfg).unwrap();
    assert!((gth[0].item() - 1.0).abs() < 1e-5);
    assert!((gx0.item() - 1.0).abs() < 1e-5);
}

#[test]
fn adjoint_requires_every_loss_gradient() {
    let g = grid(&[0.0, 1.0, 2.0]);
    let cfg = SolverConfig::default();
    let path = integrate(&Growth, &[], &one(1.0), &g, &cfg).unwrap();
    let e = integrate_adjoint(&Growth, &[], &path, &g, &[one(1.0), one(1.0)], &cfg).unwrap_err();
    assert!(e.to_string().contains("missing loss gradient"));
}

#[test]
fn backprop_zero_dynamics_identity_jacobian() {
    let tape = Tape::new();
    let x0 = tape.leaf(Tensor::from_f64(&[3], &[0.2, 0.4, -1.0]).unwrap());
    let cfg = SolverConfig::fixed(Method::Rk4, 0.25);
    let path = integrate_backprop(&Zero, &[], &x0, &grid(&[0.0, 1.0]), &cfg).unwrap();
    let end = path.select(1).unwrap();
    for j in 0..3 {
        let mut w = vec![0.0; 3];
        w[j] = 1.0;
        let l = end
            .mul(&tape.constant(Tensor::from_vec(w.clone())))
            .unwrap()
            .sum();
        let g = tape.backward(&l).unwrap().wrt(&x0);
        assert_eq!(g.data(), w.as_slice());
    }
}

#[test]
fn tracked_adjoint_matches_backprop_linear() {
    let cfg = SolverConfig::fixed(Method::Rk4, 0.01);
    let g = grid(&[0.0, 0.4, 1.0]);
    let mut results = vec![];
    for mode in [GradientMode::Adjoint, GradientMode::Backprop] {
        let tape = Tape::new();
        let th = tape.leaf(one(0.3));
        let x0 = tape.leaf(one(1.5));
        let path = integrate_tracked(&Linear, &[th.clone()], &x0, &g, &cfg, mode).unwrap();
        let l = path.square().sum();
        let grads = tape.backward(&l).unwrap();
        results.push((grads.wrt(&th).item(), grads.wrt(&x0).item()));
    }
    let (a, b) = (results[0], results[1]);
    assert!((a.0 - b.0).abs() / b.0.abs() < 1e-6, "{a:?} vs {b:?}");
    assert!((a.1 - b.1).abs() / b.1.abs() < 1e-6, "{a:?} vs {b:?}");
}
