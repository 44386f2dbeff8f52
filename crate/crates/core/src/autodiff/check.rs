//! Central finite differences, used to validate analytic gradients.

use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Real;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn finite_difference<T: Real>(
    x: &Tensor<T>,
    h: T,
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
) -> Result<Tensor<T>> {
    let mut grad = vec![T::zero(); x.len()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *g = (up - down) / (h + h);
    }
    Tensor::new(x.shape(), grad)
}

/// Largest element-wise relative error, with denominator
/// `max(|a|, |b|, floor)`.
pub fn max_relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: T) -> T {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(T::zero(), T::max)
}
