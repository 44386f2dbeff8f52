use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidode::autodiff::check::{finite_difference, max_relative_error};
use vidode::nn::MlpDynamics;
use vidode::ode::{
    integrate, integrate_adjoint, integrate_backprop, Method, SolverConfig, TimeGrid,
};
use vidode::{ParamStore, Tape, Tensor};

fn problem(seed: u64, d: usize) -> (MlpDynamics, Vec<Tensor<f64>>, Tensor<f64>) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = MlpDynamics::new(&mut store, &mut rng, "f", &[d, 8, d]);
    let theta = f.values(&store);
    let x0 = vidode::nn::init_uniform(&mut rng, &[d], 1);
    (f, theta, x0)
}

/// `L = ‖ξ(T)‖²` evaluated through the solver.
fn endpoint_loss(
    f: &MlpDynamics,
    theta: &[Tensor<f64>],
    x0: &Tensor<f64>,
    grid: &TimeGrid<f64>,
    cfg: &SolverConfig<f64>,
) -> vidode::Result<f64> {
    let path = integrate(f, theta, x0, grid, cfg)?;
    Ok(path.row(grid.len() - 1).data().iter().map(|v| v * v).sum())
}

#[test]
fn adjoint_matches_finite_differences_through_solver() {
    let (f, theta, x0) = problem(7, 4);
    let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
    let cfg = SolverConfig::dopri5(1e-10, 1e-10);
    let path = integrate(&f, &theta, &x0, &grid, &cfg).unwrap();
    let end = path.row(1);
    let lg = vec![Tensor::zeros(&[4]), end.map(|v| 2.0 * v)];
    let (gx0, gth) = integrate_adjoint(&f, &theta, &path, &grid, &lg, &cfg).unwrap();
    for i in 0..theta.len() {
        let fd = finite_difference(&theta[i], 1e-6, |p| {
            let mut th = theta.clone();
            th[i] = p.clone();
            endpoint_loss(&f, &th, &x0, &grid, &cfg)
        })
        .unwrap();
        assert!(
            max_relative_error(&gth[i], &fd, 1e-8) < 1e-4,
            "parameter {i}"
        );
    }
    let fd = finite_difference(&x0, 1e-6, |x| endpoint_loss(&f, &theta, x, &grid, &cfg)).unwrap();
    assert!(max_relative_error(&gx0, &fd, 1e-8) < 1e-4);
}

#[test]
fn adjoint_agrees_with_backprop_for_fixed_step_rk4() {
    for seed in 0..5 {
        let (f, theta, x0) = problem(100 + seed, 3 + seed as usize);
        let grid = TimeGrid::new(vec![0.0, 0.3, 0.8, 1.5]).unwrap();
        let cfg = SolverConfig::fixed(Method::Rk4, 0.01);
        let tape = Tape::new();
        let th: Vec<_> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
        let x = tape.leaf(x0.clone());
        let path = integrate_backprop(&f, &th, &x, &grid, &cfg).unwrap();
        let l = path.square().sum();
        let bp = tape.backward(&l).unwrap();

        let fwd = integrate(&f, &theta, &x0, &grid, &cfg).unwrap();
        let lg: Vec<_> = (0..grid.len())
            .map(|i| fwd.row(i).map(|v| 2.0 * v))
            .collect();
        let (gx0, gth) = integrate_adjoint(&f, &theta, &fwd, &grid, &lg, &cfg).unwrap();
        assert!(max_relative_error(&gx0, &bp.wrt(&x), 1e-8) < 1e-3);
        for (g, v) in gth.iter().zip(&th) {
            assert!(max_relative_error(g, &bp.wrt(v), 1e-8) < 1e-3);
        }
    }
}

#[test]
fn batched_state_integrates_rowwise() {
    let (f, theta, _) = problem(3, 2);
    let x0 = Tensor::from_f64(&[3, 2], &[0.1, 0.2, -0.5, 0.4, 0.9, -0.9]).unwrap();
    let grid = TimeGrid::uniform(4).unwrap();
    let cfg = SolverConfig::fixed(Method::Rk4, 0.05);
    let batched = integrate(&f, &theta, &x0, &grid, &cfg).unwrap();
    assert_eq!(batched.shape(), &[4, 3, 2]);
    for b in 0..3 {
        let single = integrate(&f, &theta, &x0.row(b), &grid, &cfg).unwrap();
        for k in 0..4 {
            assert_eq!(batched.row(k).row(b), single.row(k));
        }
    }
}
