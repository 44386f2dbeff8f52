use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, Broadcast, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub(crate) type NodeId = usize;

/// Vector-Jacobian product supplied by a custom operation: maps the output
/// cotangent to one cotangent per input.
pub type CustomBackward<T> = Rc<dyn Fn(&Tensor<T>) -> Result<Vec<Tensor<T>>>>;

pub(crate) enum Rule<T> {
    Leaf,
    Param(u64, ParamId),
    Add(Broadcast, Broadcast, Vec<usize>, Vec<usize>),
    Sub(Broadcast, Broadcast, Vec<usize>, Vec<usize>),
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
        plan_a: Broadcast,
        plan_b: Broadcast,
    },
    Div {
        a: Tensor<T>,
        b: Tensor<T>,
        plan_a: Broadcast,
        plan_b: Broadcast,
    },
    Scale(T),
    Identity,
    /// d out / d in expressed through the saved tensor.
    Tanh(Tensor<T>),
    Sigmoid(Tensor<T>),
    Exp(Tensor<T>),
    Relu(Tensor<T>),
    Log(Tensor<T>),
    Square(Tensor<T>),
    Clamp(Tensor<T>, T, T),
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(usize, usize),
    SumAll(Vec<usize>),
    SumAxis {
        shape: Vec<usize>,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Reshape(Vec<usize>),
    Stack(usize),
    Gather {
        shape: Vec<usize>,
        indices: Vec<usize>,
    },
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        geom: ConvGeom,
        batch: usize,
        out_c: usize,
    },
    ConvTranspose2d {
        x: Tensor<T>,
        w: Tensor<T>,
        /// Geometry of the output image viewed as a convolution input.
        geom: ConvGeom,
        batch: usize,
        in_c: usize,
    },
    Custom(Vec<Vec<usize>>, CustomBackward<T>),
}

pub(crate) struct Node<T> {
    parents: Vec<Option<NodeId>>,
    rule: Rule<T>,
}

/// Define-by-run record of the operations of one forward pass.
///
/// A tape created with [`Tape::inference`] evaluates the same operations but
/// records nothing, so every value it produces is detached.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<(u64, ParamId), (NodeId, Tensor<T>)>>,
    recording: bool,
}

/// A tensor value bound to a tape, with an optional node recording its origin.
#[derive(Clone)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) value: Tensor<T>,
    pub(crate) node: Option<NodeId>,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        parents: Vec<Option<NodeId>>,
        rule: impl FnOnce() -> Rule<T>,
    ) -> Option<NodeId> {
        if !self.recording || parents.iter().all(Option::is_none) {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            rule: rule(),
        });
        Some(nodes.len() - 1)
    }

    /// Untracked value: gradients never flow into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            value,
            node: None,
        }
    }

    /// Tracked input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let node = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: vec![],
                rule: Rule::Leaf,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            value,
            node,
        }
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let key = (store.store_id(), id);
        if let Some((node, value)) = self.params.borrow().get(&key) {
            return Var {
                tape: self,
                value: value.clone(),
                node: Some(*node),
            };
        }
        let value = store.value(id).clone();
        if !self.recording {
            return self.constant(value);
        }
        let node = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: vec![],
                rule: Rule::Param(key.0, id),
            });
            nodes.len() - 1
        };
        self.params.borrow_mut().insert(key, (node, value.clone()));
        Var {
            tape: self,
            value,
            node: Some(node),
        }
    }

    pub fn params(&self, store: &ParamStore<T>, ids: &[ParamId]) -> Vec<Var<'_, T>> {
        ids.iter().map(|&id| self.param(store, id)).collect()
    }

    /// Records an operation whose vector-Jacobian product is supplied by the caller.
    pub fn custom<'t>(
        &'t self,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var<'t, T> {
        let parents = inputs.iter().map(|v| v.node).collect();
        let shapes = inputs.iter().map(|v| v.value.shape().to_vec()).collect();
        let node = self.push(parents, || Rule::Custom(shapes, backward));
        Var {
            tape: self,
            value,
            node,
        }
    }

    /// Reverse sweep from a scalar loss. Each recorded node is visited once.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::NotScalar(loss.value.shape().to_vec()));
        }
        let root = loss.node.ok_or(Error::Detached)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
        };
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.rule {
                Rule::Leaf => {
                    out.leaves.insert(id, g);
                    continue;
                }
                Rule::Param(store, pid) => {
                    out.params.push((*store, *pid, g));
                    continue;
                }
                _ => {}
            }
            let parent_grads = node_backward(&node.rule, &node.parents, &g)?;
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        out.params.sort_by_key(|(s, p, _)| (*s, *p));
        Ok(out)
    }
}

/// Result of a reverse sweep: cotangents of every reached leaf and parameter.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<NodeId, Tensor<T>>,
    params: Vec<(u64, ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf or parameter variable; zeros if unreached.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        let found = var.node.and_then(|n| {
            self.leaves.get(&n).cloned().or_else(|| {
                let nodes = var.tape.nodes.borrow();
                match nodes[n].rule {
                    Rule::Param(s, p) => self.param_in(s, p).cloned(),
                    _ => None,
                }
            })
        });
        found.unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }

    fn param_in(&self, store: u64, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(s, p, _)| *s == store && *p == id)
            .map(|(_, _, g)| g)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.param_in(store.store_id(), id)
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = (u64, ParamId, &Tensor<T>)> {
        self.params.iter().map(|(s, p, g)| (*s, *p, g))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn tensor_like<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(shape.to_vec(), data)
}

fn node_backward<T: Real>(
    rule: &Rule<T>,
    parents: &[Option<NodeId>],
    g: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| parents.get(i).copied().flatten().is_some();
    let gd = g.data();
    let grads = match rule {
        Rule::Leaf | Rule::Param(..) => vec![],
        Rule::Add(pa, pb, na, nb) | Rule::Sub(pa, pb, na, nb) => {
            let ga = want(0).then(|| tensor_like(na, pa.reduce(gd, numel(na))));
            let gb = want(1).then(|| {
                let mut r = pb.reduce(gd, numel(nb));
                if matches!(rule, Rule::Sub(..)) {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                tensor_like(nb, r)
            });
            vec![ga, gb]
        }
        Rule::Mul {
            a,
            b,
            plan_a,
            plan_b,
        } => {
            let (ad, bd) = (a.data(), b.data());
            let ga = want(0).then(|| {
                let prod: Vec<T> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * bd[plan_b.index(i)])
                    .collect();
                tensor_like(a.shape(), plan_a.reduce(&prod, ad.len()))
            });
            let gb = want(1).then(|| {
                let prod: Vec<T> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * ad[plan_a.index(i)])
                    .collect();
                tensor_like(b.shape(), plan_b.reduce(&prod, bd.len()))
            });
            vec![ga, gb]
        }
        Rule::Div {
            a,
            b,
            plan_a,
            plan_b,
        } => {
            let (ad, bd) = (a.data(), b.data());
            let ga = want(0).then(|| {
                let q: Vec<T> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv / bd[plan_b.index(i)])
                    .collect();
                tensor_like(a.shape(), plan_a.reduce(&q, ad.len()))
            });
            let gb = want(1).then(|| {
                let q: Vec<T> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let bv = bd[plan_b.index(i)];
                        -gv * ad[plan_a.index(i)] / (bv * bv)
                    })
                    .collect();
                tensor_like(b.shape(), plan_b.reduce(&q, bd.len()))
            });
            vec![ga, gb]
        }
        Rule::Scale(s) => vec![Some(g.map(|v| v * *s))],
        Rule::Identity => vec![Some(g.clone())],
        Rule::Tanh(y) => vec![Some(g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))?)],
        Rule::Sigmoid(y) => vec![Some(g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))?)],
        Rule::Exp(y) => vec![Some(g.zip_map(y, |gv, yv| gv * yv)?)],
        Rule::Relu(x) => vec![Some(g.zip_map(x, |gv, xv| {
            if xv > T::zero() {
                gv
            } else {
                T::zero()
            }
        })?)],
        Rule::Log(x) => vec![Some(g.zip_map(x, |gv, xv| gv / xv)?)],
        Rule::Square(x) => vec![Some(g.zip_map(x, |gv, xv| gv * (xv + xv))?)],
        Rule::Clamp(x, lo, hi) => vec![Some(g.zip_map(x, |gv, xv| {
            if xv >= *lo && xv <= *hi {
                gv
            } else {
                T::zero()
            }
        })?)],
        Rule::Matmul { a, b, m, k, n } => {
            let ga = want(0).then(|| {
                let bt = kernels::transpose(b.data(), *k, *n);
                tensor_like(&[*m, *k], kernels::matmul(gd, &bt, *m, *n, *k))
            });
            let gb = want(1).then(|| {
                let at = kernels::transpose(a.data(), *m, *k);
                tensor_like(&[*k, *n], kernels::matmul(&at, gd, *k, *m, *n))
            });
            vec![ga, gb]
        }
        Rule::Transpose(rows, cols) => {
            vec![Some(tensor_like(
                &[*rows, *cols],
                kernels::transpose(gd, *cols, *rows),
            ))]
        }
        Rule::SumAll(shape) => vec![Some(Tensor::full(shape, g.item()))],
        Rule::SumAxis {
            shape,
            outer,
            axis,
            inner,
        } => {
            let mut out = vec![T::zero(); outer * axis * inner];
            for o in 0..*outer {
                for a in 0..*axis {
                    let dst = &mut out[(o * axis + a) * inner..(o * axis + a + 1) * inner];
                    dst.copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(tensor_like(shape, out))]
        }
        Rule::Reshape(shape) => vec![Some(g.reshape(shape)?)],
        Rule::Stack(n) => {
            let item = g.len() / n;
            let item_shape = &g.shape()[1..];
            (0..*n)
                .map(|i| {
                    want(i).then(|| tensor_like(item_shape, gd[i * item..(i + 1) * item].to_vec()))
                })
                .collect()
        }
        Rule::Gather { shape, indices } => {
            let inner: usize = shape[1..].iter().product();
            let mut out = vec![T::zero(); shape.iter().product()];
            for (j, &i) in indices.iter().enumerate() {
                let dst = &mut out[i * inner..(i + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(&gd[j * inner..(j + 1) * inner]) {
                    *d += s;
                }
            }
            vec![Some(tensor_like(shape, out))]
        }
        Rule::Conv2d {
            x,
            w,
            geom,
            batch,
            out_c,
        } => conv2d_backward(x, w, geom, *batch, *out_c, gd, [want(0), want(1), want(2)]),
        Rule::ConvTranspose2d {
            x,
            w,
            geom,
            batch,
            in_c,
        } => conv_transpose2d_backward(x, w, geom, *batch, *in_c, gd, [want(0), want(1), want(2)]),
        Rule::Custom(shapes, f) => {
            let gs = f(g)?;
            if gs.len() != shapes.len() {
                return Err(Error::invalid(format!(
                    "custom op returned {} gradients for {} inputs",
                    gs.len(),
                    shapes.len()
                )));
            }
            gs.into_iter()
                .zip(shapes)
                .enumerate()
                .map(|(i, (gi, s))| {
                    if gi.shape() != s.as_slice() {
                        return Err(Error::Shape {
                            op: "custom backward",
                            lhs: s.clone(),
                            rhs: gi.shape().to_vec(),
                        });
                    }
                    Ok(want(i).then_some(gi))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(grads)
}

fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeom,
    batch: usize,
    out_c: usize,
    gd: &[T],
    want: [bool; 3],
) -> Vec<Option<Tensor<T>>> {
    let (rows, n) = (geom.col_rows(), geom.col_cols());
    let bn = batch * n;
    let g = kernels::channel_major(gd, batch, out_c, n);
    let dw = want[1].then(|| {
        let cols_t = kernels::transpose(&geom.im2col_batch(x.data(), batch), rows, bn);
        kernels::matmul(&g, &cols_t, out_c, bn, rows)
    });
    let dx = want[0].then(|| {
        let dcols = kernels::matmul(
            &kernels::transpose(w.data(), out_c, rows),
            &g,
            rows,
            out_c,
            bn,
        );
        let mut dx = vec![T::zero(); x.len()];
        geom.col2im_batch(&dcols, batch, &mut dx);
        dx
    });
    let db = want[2].then(|| {
        (0..out_c)
            .map(|o| g[o * bn..(o + 1) * bn].iter().copied().sum::<T>())
            .collect()
    });
    vec![
        dx.map(|d| tensor_like(x.shape(), d)),
        dw.map(|d| tensor_like(w.shape(), d)),
        db.map(Tensor::from_vec),
    ]
}

fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeom,
    batch: usize,
    in_c: usize,
    gd: &[T],
    want: [bool; 3],
) -> Vec<Option<Tensor<T>>> {
    let (rows, n) = (geom.col_rows(), geom.col_cols());
    let bn = batch * n;
    let out_c = geom.channels;
    let spatial = geom.height * geom.width;
    let gcols = (want[0] || want[1]).then(|| geom.im2col_batch(gd, batch));
    let dx = want[0].then(|| {
        let d = kernels::matmul(
            w.data(),
            gcols.as_ref().expect("columns built"),
            in_c,
            rows,
            bn,
        );
        kernels::batch_major(&d, batch, in_c, n)
    });
    let dw = want[1].then(|| {
        let x_cm = kernels::channel_major(x.data(), batch, in_c, n);
        let gcols_t = kernels::transpose(gcols.as_ref().expect("columns built"), rows, bn);
        kernels::matmul(&x_cm, &gcols_t, in_c, bn, rows)
    });
    let mut db = want[2].then(|| vec![T::zero(); out_c]);
    if let Some(db) = db.as_mut() {
        for b in 0..batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (b * out_c + o) * spatial;
                *acc += gd[start..start + spatial].iter().copied().sum::<T>();
            }
        }
    }
    vec![
        dx.map(|d| tensor_like(x.shape(), d)),
        dw.map(|d| tensor_like(w.shape(), d)),
        db.map(Tensor::from_vec),
    ]
}
