use super::{Dynamics, Method, SolverConfig, TimeGrid};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order solution weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// `y + h·Σ cᵢ·kᵢ`, skipping zero coefficients.
fn lincomb<'t, T: Real>(y: &Var<'t, T>, h: T, terms: &[(f64, &Var<'t, T>)]) -> Result<Var<'t, T>> {
    let mut acc = y.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            acc = acc.add(&k.scale(h * T::of(c)))?;
        }
    }
    Ok(acc)
}

fn eval_checked<'t, T: Real, F: Dynamics<T>>(
    f: &F,
    params: &[Var<'t, T>],
    y: &Var<'t, T>,
    t: T,
) -> Result<Var<'t, T>> {
    let dy = f.eval(params, y, t)?;
    if dy.shape() != y.shape() {
        return Err(Error::Shape {
            op: "dynamics output",
            lhs: y.shape().to_vec(),
            rhs: dy.shape().to_vec(),
        });
    }
    Ok(dy)
}

/// States at every grid time; element 0 is `x0` itself.
pub(super) fn solve<'t, T: Real, F: Dynamics<T>>(
    f: &F,
    params: &[Var<'t, T>],
    x0: &Var<'t, T>,
    grid: &TimeGrid<T>,
    cfg: &SolverConfig<T>,
) -> Result<Vec<Var<'t, T>>> {
    cfg.validate()?;
    if !x0.value().is_finite() {
        return Err(Error::NonFinite("initial state".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    out.push(x0.clone());
    let times = grid.times();
    let mut adaptive = AdaptiveState::new(grid);
    for seg in times.windows(2) {
        let y = out.last().expect("non-empty").clone();
        let next = match cfg.method {
            Method::Euler | Method::Rk4 => fixed_segment(f, params, y, seg[0], seg[1], cfg)?,
            Method::Dopri5 => adaptive.segment(f, params, y, seg[0], seg[1], cfg)?,
        };
        out.push(next);
    }
    Ok(out)
}

fn fixed_segment<'t, T: Real, F: Dynamics<T>>(
    f: &F,
    params: &[Var<'t, T>],
    mut y: Var<'t, T>,
    t0: T,
    t1: T,
    cfg: &SolverConfig<T>,
) -> Result<Var<'t, T>> {
    let span = t1 - t0;
    let ratio = (span.abs() / cfg.step).as_f64();
    let n = ((ratio - 1e-9).ceil() as usize).max(1);
    if n > cfg.max_steps {
        return Err(Error::StepLimit {
            max_steps: cfg.max_steps,
            t0: t0.as_f64(),
            t1: t1.as_f64(),
        });
    }
    let h = span / T::of(n as f64);
    let half = h * T::of(0.5);
    for i in 0..n {
        let t = t0 + h * T::of(i as f64);
        y = match cfg.method {
            Method::Euler => {
                let k1 = eval_checked(f, params, &y, t)?;
                lincomb(&y, h, &[(1.0, &k1)])?
            }
            _ => {
                let k1 = eval_checked(f, params, &y, t)?;
                let k2 = eval_checked(f, params, &lincomb(&y, half, &[(1.0, &k1)])?, t + half)?;
                let k3 = eval_checked(f, params, &lincomb(&y, half, &[(1.0, &k2)])?, t + half)?;
                let k4 = eval_checked(f, params, &lincomb(&y, h, &[(1.0, &k3)])?, t + h)?;
                lincomb(
                    &y,
                    h,
                    &[
                        (1.0 / 6.0, &k1),
                        (1.0 / 3.0, &k2),
                        (1.0 / 3.0, &k3),
                        (1.0 / 6.0, &k4),
                    ],
                )?
            }
        };
        if !y.value().is_finite() {
            return Err(Error::NonFinite(format!(
                "state at t = {}",
                (t + h).as_f64()
            )));
        }
    }
    Ok(y)
}

/// Step-size memory carried across grid segments.
struct AdaptiveState<T> {
    /// Proposed magnitude of the next step.
    h: T,
    first_attempt: bool,
}

impl<T: Real> AdaptiveState<T> {
    fn new(grid: &TimeGrid<T>) -> Self {
        let span = (grid.last() - grid.first()).abs();
        AdaptiveState {
            h: T::of(0.01) * span,
            first_attempt: true,
        }
    }

    fn error_ratio(y: &Tensor<T>, y_new: &Tensor<T>, err: &[T], cfg: &SolverConfig<T>) -> T {
        let n = T::of(err.len().max(1) as f64);
        let sum: T = err
            .iter()
            .zip(y.data().iter().zip(y_new.data()))
            .map(|(&e, (&a, &b))| {
                let scale = cfg.atol + cfg.rtol * a.abs().max(b.abs());
                let r = e / scale;
                r * r
            })
            .sum();
        (sum / n).sqrt()
    }

    fn segment<'t, F: Dynamics<T>>(
        &mut self,
        f: &F,
        params: &[Var<'t, T>],
        mut y: Var<'t, T>,
        t0: T,
        t1: T,
        cfg: &SolverConfig<T>,
    ) -> Result<Var<'t, T>> {
        let dir = if t1 >= t0 { T::one() } else { -T::one() };
        let mut t = t0;
        let mut attempts = 0usize;
        let mut k1 = eval_checked(f, params, &y, t)?;
        let tiny = T::epsilon() * T::of(16.0);
        while (t1 - t) * dir > T::zero() {
            attempts += 1;
            if attempts > cfg.max_steps {
                return Err(Error::StepLimit {
                    max_steps: cfg.max_steps,
                    t0: t0.as_f64(),
                    t1: t1.as_f64(),
                });
            }
            let remaining = (t1 - t).abs();
            let last = self.h >= remaining * (T::one() - tiny);
            let h_abs = if last { remaining } else { self.h };
            if h_abs <= tiny * t.abs().max(T::one()) {
                return Err(Error::NonFinite(format!(
                    "step size underflow at t = {}",
                    t.as_f64()
                )));
            }
            let h = h_abs * dir;

            let mut ks: Vec<Var<'t, T>> = Vec::with_capacity(7);
            ks.push(k1.clone());
            for stage in 1..7 {
                let terms: Vec<(f64, &Var<'t, T>)> =
                    A[stage].iter().copied().zip(ks.iter()).collect();
                let ys = lincomb(&y, h, &terms)?;
                if stage == 6 {
                    // The last stage point is the 5th-order solution itself.
                    let k7 = eval_checked(f, params, &ys, t + h)?;
                    ks.push(k7);
                    ks.push(ys);
                    break;
                }
                ks.push(eval_checked(f, params, &ys, t + h * T::of(C[stage]))?);
            }
            let y_new = ks.pop().expect("solution pushed");

            let mut err = vec![T::zero(); y.value().len()];
            for (c, k) in E.iter().zip(&ks) {
                if *c == 0.0 {
                    continue;
                }
                let w = h * T::of(*c);
                for (e, &kv) in err.iter_mut().zip(k.value().data()) {
                    *e += w * kv;
                }
            }
            let ratio = Self::error_ratio(y.value(), y_new.value(), &err, cfg);
            let accepted = ratio.is_finite() && ratio <= T::one() && y_new.value().is_finite();
            let factor = if !ratio.is_finite() {
                T::of(MIN_FACTOR)
            } else if ratio == T::zero() {
                T::of(MAX_FACTOR)
            } else {
                (T::of(SAFETY) * ratio.powf(T::of(-0.2)))
                    .max(T::of(MIN_FACTOR))
                    .min(T::of(MAX_FACTOR))
            };
            if accepted {
                t = if last { t1 } else { t + h };
                y = y_new;
                k1 = ks.pop().expect("k7 present");
                // A truncated final step must not shrink the standing proposal.
                self.h = if last {
                    self.h.max(h_abs * factor)
                } else {
                    h_abs * factor
                };
                self.first_attempt = false;
            } else if self.first_attempt {
                self.h = h_abs * T::of(0.5);
                self.first_attempt = false;
            } else {
                self.h = h_abs * factor;
            }
        }
        Ok(y)
    }
}
