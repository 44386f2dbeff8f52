use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidode::autodiff::check::{finite_difference, max_relative_error};
use vidode::{Error, ParamStore, Tape, Tensor, Var};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn elementwise_values() {
    let tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]));
    let b = tape.leaf(t(&[2], &[3.0, 4.0]));
    assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
    assert_eq!(a.sub(&b).unwrap().value().data(), &[-2.0, -2.0]);
    assert_eq!(a.mul(&b).unwrap().value().data(), &[3.0, 8.0]);
    assert_eq!(a.div(&b).unwrap().value().data(), &[1.0 / 3.0, 0.5]);
    assert_eq!(tape.leaf(t(&[1], &[0.0])).tanh().value().data(), &[0.0]);
    assert_eq!(
        tape.leaf(t(&[2], &[-1.0, 2.0])).relu().value().data(),
        &[0.0, 2.0]
    );
}

#[test]
fn broadcasting_and_mismatch() {
    let tape = Tape::new();
    let m = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let row = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
    assert_eq!(
        m.add(&row).unwrap().value().data(),
        &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
    );
    let s = tape.leaf(Tensor::scalar(2.0));
    assert_eq!(m.mul(&s).unwrap().shape(), &[2, 3]);
    let bad = tape.leaf(t(&[2], &[1.0, 1.0]));
    match m.add(&bad).unwrap_err() {
        Error::Shape { lhs, rhs, .. } => assert_eq!((lhs, rhs), (vec![2, 3], vec![2])),
        e => panic!("unexpected {e}"),
    }
    // Gradients of broadcast operands reduce back to their own shapes.
    let l = m.mul(&row).unwrap().sum();
    let g = tape.backward(&l).unwrap();
    assert_eq!(g.wrt(&row).data(), &[5.0, 7.0, 9.0]);
    assert_eq!(g.wrt(&m).shape(), &[2, 3]);
}

#[test]
fn square_gradient_matches_finite_differences() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let tape = Tape::new();
    let a = tape.leaf(x.clone());
    let g = tape.backward(&a.square().sum()).unwrap().wrt(&a);
    let fd = finite_difference(&x, 1e-6, |v| Ok(v.data().iter().map(|e| e * e).sum())).unwrap();
    assert!(max_relative_error(&g, &fd, 1e-8) < 1e-8);
    assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn matmul_values_and_gradient() {
    let tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(i2.matmul(&m).unwrap().value(), m.value());
    let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.0]);
    assert!(r.matmul(&r).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a0, b0) = (random(&mut rng, &[3, 3]), random(&mut rng, &[3, 3]));
    let tape = Tape::new();
    let (a, b) = (tape.leaf(a0.clone()), tape.leaf(b0.clone()));
    let g = tape.backward(&a.matmul(&b).unwrap().sum()).unwrap();
    let fd = finite_difference(&a0, 1e-6, |x| {
        let tp = Tape::inference();
        Ok(tp
            .constant(x.clone())
            .matmul(&tp.constant(b0.clone()))?
            .sum()
            .value()
            .item())
    })
    .unwrap();
    assert!(max_relative_error(&g.wrt(&a), &fd, 1e-8) < 1e-6);
}

#[test]
fn reductions() {
    let tape = Tape::new();
    let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(m.sum().value().item(), 10.0);
    assert_eq!(m.sum_axis(0).unwrap().value().data(), &[4.0, 6.0]);
    assert_eq!(m.sum_axis(1).unwrap().value().data(), &[3.0, 7.0]);
    assert!(matches!(m.sum_axis(2), Err(Error::Axis { .. })));
    assert_eq!(tape.leaf(t(&[2], &[2.0, 4.0])).mean().value().item(), 3.0);
    let a = tape.leaf(t(&[4], &[1.0, 5.0, -2.0, 0.5]));
    let g = tape.backward(&a.mean()).unwrap().wrt(&a);
    assert_eq!(g.data(), &[0.25; 4]);
}

#[test]
fn backward_contracts() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[3], &[0.5, -1.0, 2.0]));
    let v = store.add("v", t(&[2], &[1.0, -2.0]));
    {
        let tape = Tape::new();
        tape.param(&store, w).sum().backward(&mut store).unwrap();
    }
    assert_eq!(store.grad(w).data(), &[1.0, 1.0, 1.0]);
    {
        let tape = Tape::new();
        tape.param(&store, v)
            .square()
            .sum()
            .backward(&mut store)
            .unwrap();
    }
    assert_eq!(store.grad(v).data(), &[2.0, -4.0]);
    // Repeated backward passes accumulate until reset.
    {
        let tape = Tape::new();
        tape.param(&store, w).sum().backward(&mut store).unwrap();
    }
    assert_eq!(store.grad(w).data(), &[2.0, 2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.grad(w).data(), &[0.0, 0.0, 0.0]);

    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(&x), Err(Error::NotScalar(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(&c), Err(Error::Detached)));
}

#[test]
fn constants_have_no_node() {
    let tape = Tape::new();
    let c = tape.constant(t(&[2], &[1.0, 2.0]));
    assert!(!c.is_tracked());
    assert!(!c.tanh().add(&c).unwrap().is_tracked());
    let inf = Tape::inference();
    assert!(!inf.leaf(t(&[1], &[1.0])).is_tracked());
}

fn two_layer(x: &Tensor<f64>, params: &[Tensor<f64>]) -> vidode::Result<f64> {
    let tape = Tape::inference();
    let h = tape
        .constant(x.clone())
        .matmul(&tape.constant(params[0].clone()))?
        .add(&tape.constant(params[1].clone()))?
        .tanh();
    Ok(h.matmul(&tape.constant(params[2].clone()))?
        .sum()
        .value()
        .item())
}

#[test]
fn two_layer_network_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[5, 4]);
    let params = [
        random(&mut rng, &[4, 6]),
        random(&mut rng, &[6]),
        random(&mut rng, &[6, 1]),
    ];
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let h = tape
        .constant(x.clone())
        .matmul(&vars[0])
        .unwrap()
        .add(&vars[1])
        .unwrap()
        .tanh();
    let grads = tape.backward(&h.matmul(&vars[2]).unwrap().sum()).unwrap();
    for i in 0..3 {
        let fd = finite_difference(&params[i], 1e-6, |p| {
            let mut ps = params.clone();
            ps[i] = p.clone();
            two_layer(&x, &ps)
        })
        .unwrap();
        assert!(max_relative_error(&grads.wrt(&vars[i]), &fd, 1e-8) < 1e-5);
    }
}

#[test]
fn every_op_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a0 = random(&mut rng, &[2, 3]);
    let b0 = random(&mut rng, &[3]).map(|v| v.abs() + 0.5);
    let pos = a0.map(|v| v.abs() + 0.2);
    let run = |a: &Tensor<f64>,
               b: &Tensor<f64>,
               which: usize,
               tape: &Tape<f64>|
     -> vidode::Result<(f64, Option<(Tensor<f64>, Tensor<f64>)>)> {
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let y = match which {
            0 => va.add(&vb)?,
            1 => va.sub(&vb)?,
            2 => va.mul(&vb)?,
            3 => va.div(&vb)?,
            4 => va.tanh().mul(&vb)?,
            5 => va.sigmoid().mul(&vb)?,
            6 => va.exp().mul(&vb)?,
            7 => va.log().mul(&vb)?,
            8 => va.square().mul(&vb)?,
            9 => va.relu().mul(&vb)?,
            10 => va.clamp(-0.3, 0.4).mul(&vb)?,
            11 => va
                .transpose()?
                .reshape(&[6])?
                .gather(&[5, 0, 0, 3])?
                .scale(1.5),
            12 => va.sum_axis(0)?.mul(&vb)?.mean().add_scalar(1.0),
            _ => Var::stack(&[va.clone(), va.neg()])?
                .mean_axes(&[0, 1])?
                .mul(&vb)?,
        };
        let l = y.square().sum();
        let v = l.value().item();
        if tape.is_recording() {
            let g = tape.backward(&l)?;
            Ok((v, Some((g.wrt(&va), g.wrt(&vb)))))
        } else {
            Ok((v, None))
        }
    };
    for which in 0..14 {
        let a = if which == 7 { pos.clone() } else { a0.clone() };
        let tape = Tape::new();
        let (_, g) = run(&a, &b0, which, &tape).unwrap();
        let (ga, gb) = g.unwrap();
        let fa =
            finite_difference(&a, 1e-6, |x| Ok(run(x, &b0, which, &Tape::inference())?.0)).unwrap();
        let fb =
            finite_difference(&b0, 1e-6, |x| Ok(run(&a, x, which, &Tape::inference())?.0)).unwrap();
        assert!(
            max_relative_error(&ga, &fa, 1e-8) < 1e-4,
            "op {which}: wrt a"
        );
        assert!(
            max_relative_error(&gb, &fb, 1e-8) < 1e-4,
            "op {which}: wrt b"
        );
    }
}

#[test]
fn deterministic_outputs_and_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, w) = (random(&mut rng, &[4, 5]), random(&mut rng, &[5, 3]));
        let tape = Tape::new();
        let wv = tape.leaf(w);
        let y = tape.constant(x).matmul(&wv).unwrap().tanh().sum();
        (
            y.value().item().to_bits(),
            tape.backward(&y).unwrap().wrt(&wv),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_loss(alpha in -5.0f64..5.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, &[3, 2]);
        let x = random(&mut rng, &[4, 3]);
        let grad = |scale: f64| {
            let tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let l = tape.constant(x.clone()).matmul(&wv).unwrap().tanh().square().sum();
            tape.backward(&l.scale(scale)).unwrap().wrt(&wv)
        };
        let (g1, ga) = (grad(1.0), grad(alpha));
        for (a, b) in g1.data().iter().zip(ga.data()) {
            prop_assert!((a * alpha - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gradient_shape_mirrors_parameter(rows in 1usize..5, cols in 1usize..5) {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::full(&[rows, cols], 0.3));
        let tape = Tape::new();
        tape.param(&store, p).exp().sum().backward(&mut store).unwrap();
        prop_assert_eq!(store.grad(p).shape(), &[rows, cols]);
    }
}
