//! Differentiable operations on [`Var`].

use super::kernels::{self, Broadcast, ConvGeom};
use super::tape::{Rule, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// True when the value is connected to a recording tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value with the gradient path cut.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value.clone())
    }

    fn derive(
        &self,
        value: Tensor<T>,
        parents: &[&Var<'t, T>],
        rule: impl FnOnce() -> Rule<T>,
    ) -> Var<'t, T> {
        let node = self
            .tape
            .push(parents.iter().map(|p| p.node).collect(), rule);
        Var {
            tape: self.tape,
            value,
            node,
        }
    }

    fn binary(&self, other: &Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
            op: match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let plan_a = Broadcast::plan(sa, &out_shape);
        let plan_b = Broadcast::plan(sb, &out_shape);
        let (ad, bd) = (self.value.data(), other.value.data());
        let n: usize = out_shape.iter().product();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = match (&plan_a, &plan_b) {
            (Broadcast::Same, Broadcast::Same) => {
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            }
            _ => (0..n)
                .map(|i| f(ad[plan_a.index(i)], bd[plan_b.index(i)]))
                .collect(),
        };
        let value = Tensor::from_parts(out_shape, data);
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.derive(value, &[self, other], move || match kind {
            Binary::Add => Rule::Add(plan_a, plan_b, a.shape().to_vec(), b.shape().to_vec()),
            Binary::Sub => Rule::Sub(plan_a, plan_b, a.shape().to_vec(), b.shape().to_vec()),
            Binary::Mul => Rule::Mul {
                a,
                b,
                plan_a,
                plan_b,
            },
            Binary::Div => Rule::Div {
                a,
                b,
                plan_a,
                plan_b,
            },
        }))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Div)
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        self.derive(self.value.map(|v| v * s), &[self], || Rule::Scale(s))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        self.derive(self.value.map(|v| v + s), &[self], || Rule::Identity)
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let y = self.value.map(T::tanh);
        self.derive(y.clone(), &[self], || Rule::Tanh(y))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let y = self.value.map(|v| T::one() / (T::one() + (-v).exp()));
        self.derive(y.clone(), &[self], || Rule::Sigmoid(y))
    }

    pub fn exp(&self) -> Var<'t, T> {
        let y = self.value.map(T::exp);
        self.derive(y.clone(), &[self], || Rule::Exp(y))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value.clone();
        self.derive(self.value.map(|v| v.max(T::zero())), &[self], || {
            Rule::Relu(x)
        })
    }

    pub fn log(&self) -> Var<'t, T> {
        let x = self.value.clone();
        self.derive(self.value.map(T::ln), &[self], || Rule::Log(x))
    }

    pub fn square(&self) -> Var<'t, T> {
        let x = self.value.clone();
        self.derive(self.value.map(|v| v * v), &[self], || Rule::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        let x = self.value.clone();
        self.derive(self.value.map(|v| v.max(lo).min(hi)), &[self], || {
            Rule::Clamp(x, lo, hi)
        })
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value.data(), other.value.data(), m, k, n);
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(
            self.derive(Tensor::from_parts(vec![m, n], data), &[self, other], || {
                Rule::Matmul { a, b, m, k, n }
            }),
        )
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value.data(), r, c);
        Ok(
            self.derive(Tensor::from_parts(vec![c, r], data), &[self], || {
                Rule::Transpose(r, c)
            }),
        )
    }

    pub fn sum(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        self.derive(Tensor::scalar(self.value.sum()), &[self], || {
            Rule::SumAll(shape)
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::of(self.value.len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let src = self.value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(
            self.derive(Tensor::from_parts(out_shape, out), &[self], || {
                Rule::SumAxis {
                    shape,
                    outer,
                    axis: len,
                    inner,
                }
            }),
        )
    }

    /// Reduces several axes (any order) by summation.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.dedup();
        let mut out = self.clone();
        for ax in sorted {
            out = out.sum_axis(ax)?;
        }
        Ok(out)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        for &ax in axes {
            if ax >= self.shape().len() {
                return Err(Error::Axis {
                    op: "mean_axes",
                    axis: ax,
                    rank: self.shape().len(),
                });
            }
        }
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        Ok(self.sum_axes(axes)?.scale(T::one() / T::of(count as f64)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value.reshape(shape)?;
        let old = self.shape().to_vec();
        Ok(self.derive(value, &[self], || Rule::Reshape(old)))
    }

    /// Stacks equally shaped variables along a new leading axis.
    pub fn stack(items: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero variables"))?;
        let values: Vec<Tensor<T>> = items.iter().map(|v| v.value.clone()).collect();
        let value = Tensor::stack(&values)?;
        let parents: Vec<&Var<'t, T>> = items.iter().collect();
        let n = items.len();
        Ok(first.derive(value, &parents, || Rule::Stack(n)))
    }

    /// Rows of the leading axis, in the given order (repeats allowed).
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        let lead = *shape.first().ok_or_else(|| Error::Axis {
            op: "gather",
            axis: 0,
            rank: 0,
        })?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= lead) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of range for leading extent {lead}"
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value.data();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let indices = indices.to_vec();
        Ok(
            self.derive(Tensor::from_parts(out_shape, data), &[self], || {
                Rule::Gather { shape, indices }
            }),
        )
    }

    /// Row `i` of the leading axis, with that axis removed.
    pub fn select(&self, i: usize) -> Result<Var<'t, T>> {
        let rest = self.shape()[1..].to_vec();
        self.gather(&[i])?.reshape(&rest)
    }

    /// 2-D cross-correlation. `self: [B, C, H, W]`, `weight: [O, C, k, k]`, `bias: [O]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        let shape_err = || Error::Shape {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err());
        }
        let (batch, out_c, k) = (xs[0], ws[0], ws[2]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], k, stride, pad).ok_or_else(|| {
            Error::invalid(format!(
                "conv2d: non-integral output size for input {xs:?}, kernel {k}, stride {stride}, pad {pad}"
            ))
        })?;
        if let Some(b) = bias {
            if b.shape() != [out_c] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: vec![out_c],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (rows, n) = (geom.col_rows(), geom.col_cols());
        let cols = geom.im2col_batch(self.value.data(), batch);
        let mut y = vec![T::zero(); out_c * batch * n];
        if let Some(bias) = bias {
            for (o, &bv) in bias.value.data().iter().enumerate() {
                y[o * batch * n..(o + 1) * batch * n].fill(bv);
            }
        }
        kernels::matmul_acc(weight.value.data(), &cols, &mut y, out_c, rows, batch * n);
        let out = kernels::batch_major(&y, batch, out_c, n);
        let value = Tensor::from_parts(vec![batch, out_c, geom.out_h, geom.out_w], out);
        let (x, w) = (self.value.clone(), weight.value.clone());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.derive(value, &parents, || Rule::Conv2d {
            x,
            w,
            geom,
            batch,
            out_c,
        }))
    }

    /// Transposed convolution, the adjoint of [`Var::conv2d`] with the same kernel.
    /// `self: [B, Cin, H, W]`, `weight: [Cin, Cout, k, k]`, `bias: [Cout]`;
    /// output extent `(H − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        let shape_err = || Error::Shape {
            op: "conv_transpose2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err());
        }
        let (batch, in_c, out_c, k) = (xs[0], xs[1], ws[1], ws[2]);
        let extent = |n: usize| {
            ((n - 1) * stride + k)
                .checked_sub(2 * pad)
                .filter(|&e| e > 0)
        };
        let (oh, ow) = match (extent(xs[2]), extent(xs[3])) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(shape_err()),
        };
        let geom = ConvGeom::new(out_c, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
            .ok_or_else(shape_err)?;
        if let Some(b) = bias {
            if b.shape() != [out_c] {
                return Err(Error::Shape {
                    op: "conv_transpose2d bias",
                    lhs: vec![out_c],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (rows, n) = (geom.col_rows(), geom.col_cols());
        let wt = kernels::transpose(weight.value.data(), in_c, rows);
        let x_cm = kernels::channel_major(self.value.data(), batch, in_c, n);
        let cols = kernels::matmul(&wt, &x_cm, rows, in_c, batch * n);
        let mut out = vec![T::zero(); batch * geom.image_len()];
        if let Some(bias) = bias {
            for (i, &bv) in bias
                .value
                .data()
                .iter()
                .cycle()
                .take(batch * out_c)
                .enumerate()
            {
                out[i * oh * ow..(i + 1) * oh * ow].fill(bv);
            }
        }
        geom.col2im_batch(&cols, batch, &mut out);
        let value = Tensor::from_parts(vec![batch, out_c, oh, ow], out);
        let (x, w) = (self.value.clone(), weight.value.clone());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.derive(value, &parents, || Rule::ConvTranspose2d {
            x,
            w,
            geom,
            batch,
            in_c,
        }))
    }

    /// Accumulates this scalar's gradients into `store` (see [`Tape::backward`]).
    pub fn backward(&self, store: &mut super::ParamStore<T>) -> Result<super::Gradients<T>> {
        let grads = self.tape.backward(self)?;
        store.accumulate(&grads);
        Ok(grads)
    }
}
