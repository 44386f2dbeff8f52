//! Layers for the frame encoders, decoders, recurrent encoder and latent dynamics.
//!
//! Every layer keeps [`ParamId`]s into a shared [`ParamStore`]; forward passes
//! bind them onto the current tape. Shapes below exclude the leading batch axis.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ode::Dynamics;
use crate::scalar::Real;

/// Bound on the log-variance emitted by [`GaussianHead`].
pub const LOG_VAR_BOUND: f64 = 10.0;

/// Uniform(−1/√fan_in, 1/√fan_in) initial values.
pub fn init_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `x · Wᵀ + b` for `w: [out, in]`, `b: [out]`, `x: [batch, in]`.
pub fn dense_forward<'t, T: Real>(
    w: &Var<'t, T>,
    b: &Var<'t, T>,
    x: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (ws, xs) = (w.shape(), x.shape());
    if ws.len() != 2 || xs.len() != 2 || ws[1] != xs[1] || b.shape() != [ws[0]] {
        return Err(Error::Shape {
            op: "dense",
            lhs: ws.to_vec(),
            rhs: xs.to_vec(),
        });
    }
    x.matmul(&w.transpose()?)?.add(b)
}

/// `tanh(h · W_hᵀ + x · W_xᵀ + b)`.
pub fn rnn_cell_step<'t, T: Real>(
    w_h: &Var<'t, T>,
    w_x: &Var<'t, T>,
    b: &Var<'t, T>,
    h: &Var<'t, T>,
    x: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    if h.shape().len() != 2 || x.shape().len() != 2 || h.shape()[0] != x.shape()[0] {
        return Err(Error::Shape {
            op: "rnn_cell",
            lhs: h.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let zh = h.matmul(&w_h.transpose()?)?;
    let zx = x.matmul(&w_x.transpose()?)?;
    zh.add(&zx)?.add(b).map(|z| z.tanh())
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[outputs, inputs], inputs),
        );
        let bias = store.add(
            format!("{name}.bias"),
            init_uniform(rng, &[outputs], inputs),
        );
        Dense {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        dense_forward(
            &tape.param(store, self.weight),
            &tape.param(store, self.bias),
            x,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
        );
        let bias = store.add(
            format!("{name}.bias"),
            init_uniform(rng, &[out_channels], fan_in),
        );
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        let [c, h, w] = *input else { return None };
        if c != self.in_channels {
            return None;
        }
        let g =
            crate::autodiff::kernels::ConvGeom::new(c, h, w, self.kernel, self.stride, self.pad)?;
        Some(vec![self.out_channels, g.out_h, g.out_w])
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let b = tape.param(store, self.bias);
        x.conv2d(
            &tape.param(store, self.weight),
            Some(&b),
            self.stride,
            self.pad,
        )
    }
}

/// Kernel layout `[in_channels, out_channels, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = out_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[in_channels, out_channels, kernel, kernel], fan_in),
        );
        let bias = store.add(
            format!("{name}.bias"),
            init_uniform(rng, &[out_channels], fan_in),
        );
        ConvTranspose2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        let [c, h, w] = *input else { return None };
        if c != self.in_channels || h == 0 || w == 0 {
            return None;
        }
        let ext = |n: usize| {
            ((n - 1) * self.stride + self.kernel)
                .checked_sub(2 * self.pad)
                .filter(|&e| e > 0)
        };
        Some(vec![self.out_channels, ext(h)?, ext(w)?])
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let b = tape.param(store, self.bias);
        x.conv_transpose2d(
            &tape.param(store, self.weight),
            Some(&b),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'t, T: Real>(self, x: &Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    Activation(Activation),
    /// Per-sample reshape; the batch axis is kept.
    Reshape(Vec<usize>),
}

impl Layer {
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            Layer::Dense(d) => (input == [d.inputs]).then(|| vec![d.outputs]),
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::ConvTranspose2d(c) => c.output_shape(input),
            Layer::Activation(_) => Some(input.to_vec()),
            Layer::Reshape(s) => {
                (s.iter().product::<usize>() == input.iter().product::<usize>()).then(|| s.clone())
            }
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match self {
            Layer::Dense(d) => d.forward(tape, store, x),
            Layer::Conv2d(c) => c.forward(tape, store, x),
            Layer::ConvTranspose2d(c) => c.forward(tape, store, x),
            Layer::Activation(a) => Ok(a.apply(x)),
            Layer::Reshape(s) => {
                let mut shape = vec![x.shape()[0]];
                shape.extend_from_slice(s);
                x.reshape(&shape)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Layer::Dense(d) => vec![d.weight, d.bias],
            Layer::Conv2d(c) => vec![c.weight, c.bias],
            Layer::ConvTranspose2d(c) => vec![c.weight, c.bias],
            Layer::Activation(_) | Layer::Reshape(_) => vec![],
        }
    }
}

/// Layers applied in order, shape-checked at construction.
#[derive(Clone, Debug)]
pub struct Sequential {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl Sequential {
    pub fn new(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| {
                Error::invalid(format!(
                    "layer {i} ({layer:?}) cannot follow per-sample shape {shape:?}"
                ))
            })?;
        }
        Ok(Sequential {
            layers,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if x.shape().get(1..) != Some(self.input_shape.as_slice()) {
            let mut want = vec![0];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::Shape {
                op: "sequential input",
                lhs: want,
                rhs: x.shape().to_vec(),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(tape, store, &h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct RnnCell {
    pub w_h: ParamId,
    pub w_x: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl RnnCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        hidden: usize,
    ) -> Self {
        let w_h = store.add(
            format!("{name}.w_h"),
            init_uniform(rng, &[hidden, hidden], hidden),
        );
        let w_x = store.add(
            format!("{name}.w_x"),
            init_uniform(rng, &[hidden, inputs], hidden),
        );
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, &[hidden], hidden));
        RnnCell {
            w_h,
            w_x,
            bias,
            inputs,
            hidden,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_h, self.w_x, self.bias]
    }

    pub fn step<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        h: &Var<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        rnn_cell_step(
            &tape.param(store, self.w_h),
            &tape.param(store, self.w_x),
            &tape.param(store, self.bias),
            h,
            x,
        )
    }

    /// Folds the cell over `inputs` in order, starting from `h0`.
    pub fn run<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        h0: &Var<'t, T>,
        inputs: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        inputs
            .iter()
            .try_fold(h0.clone(), |h, x| self.step(tape, store, &h, x))
    }

    pub fn zero_state<'t, T: Real>(&self, tape: &'t Tape<T>, batch: usize) -> Var<'t, T> {
        tape.constant(Tensor::zeros(&[batch, self.hidden]))
    }
}

/// Diagonal Gaussian `N(mean, exp(log_var))`.
#[derive(Clone, Debug)]
pub struct GaussianLatent<'t, T: Real> {
    pub mean: Var<'t, T>,
    pub log_var: Var<'t, T>,
}

impl<'t, T: Real> GaussianLatent<'t, T> {
    /// Reparameterised draw `mean + exp(½·log_var)·ε`.
    pub fn sample(&self, eps: &Tensor<T>) -> Result<Var<'t, T>> {
        let tape = self.mean.tape();
        let std = self.log_var.scale(T::of(0.5)).exp();
        self.mean.add(&std.mul(&tape.constant(eps.clone()))?)
    }

    /// `KL(q ‖ N(0, I))` per batch row, `½ Σ_d (μ² + σ² − 1 − log σ²)`.
    pub fn kl_standard_normal(&self) -> Result<Var<'t, T>> {
        let terms = self
            .mean
            .square()
            .add(&self.log_var.exp())?
            .sub(&self.log_var)?
            .add_scalar(-T::one());
        Ok(terms.sum_axis(1)?.scale(T::of(0.5)))
    }
}

#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Dense,
    pub log_var: Dense,
}

impl GaussianHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        latent: usize,
    ) -> Self {
        GaussianHead {
            mean: Dense::new(store, rng, &format!("{name}.mean"), inputs, latent),
            log_var: Dense::new(store, rng, &format!("{name}.log_var"), inputs, latent),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.mean.weight,
            self.mean.bias,
            self.log_var.weight,
            self.log_var.bias,
        ]
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        h: &Var<'t, T>,
    ) -> Result<GaussianLatent<'t, T>> {
        let bound = T::of(LOG_VAR_BOUND);
        Ok(GaussianLatent {
            mean: self.mean.forward(tape, store, h)?,
            log_var: self.log_var.forward(tape, store, h)?.clamp(-bound, bound),
        })
    }
}

/// Autonomous MLP vector field: dense layers with `tanh` between them and a
/// linear output. Parameters are bound in the order `W₁, b₁, W₂, b₂, …`.
#[derive(Clone, Debug)]
pub struct MlpDynamics {
    dims: Vec<usize>,
    ids: Vec<ParamId>,
}

impl MlpDynamics {
    /// `dims = [D, hidden…, D]`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
    ) -> Self {
        assert!(
            dims.len() >= 2,
            "MLP needs at least input and output widths"
        );
        let mut ids = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let layer = Dense::new(store, rng, &format!("{name}.{i}"), w[0], w[1]);
            ids.push(layer.weight);
            ids.push(layer.bias);
        }
        MlpDynamics {
            dims: dims.to_vec(),
            ids,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn bind<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> Vec<Var<'t, T>> {
        tape.params(store, &self.ids)
    }

    pub fn values<T: Real>(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.ids.iter().map(|&id| store.value(id).clone()).collect()
    }
}

impl<T: Real> Dynamics<T> for MlpDynamics {
    fn eval<'t>(&self, params: &[Var<'t, T>], state: &Var<'t, T>, _t: T) -> Result<Var<'t, T>> {
        if params.len() != self.ids.len() {
            return Err(Error::invalid(format!(
                "MLP dynamics expects {} parameter tensors, got {}",
                self.ids.len(),
                params.len()
            )));
        }
        let flat = state.shape().len() == 1;
        let mut h = if flat {
            state.reshape(&[1, state.shape()[0]])?
        } else {
            state.clone()
        };
        let layers = params.len() / 2;
        for (i, pair) in params.chunks(2).enumerate() {
            h = dense_forward(&pair[0], &pair[1], &h)?;
            if i + 1 < layers {
                h = h.tanh();
            }
        }
        if flat {
            h.reshape(state.shape())
        } else {
            Ok(h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn sequential_rejects_incompatible_layers() {
        let mut store = ParamStore::<f64>::new();
        let d = Dense::new(&mut store, &mut rng(), "d", 5, 3);
        assert!(Sequential::new(&[4], vec![Layer::Dense(d.clone())]).is_err());
        assert!(Sequential::new(&[5], vec![Layer::Dense(d)]).is_ok());
        let c = Conv2d::new(&mut store, &mut rng(), "c", 1, 2, 3, 2, 0);
        assert!(Sequential::new(&[1, 6, 6], vec![Layer::Conv2d(c.clone())]).is_err());
        let s = Sequential::new(&[1, 7, 7], vec![Layer::Conv2d(c)]).unwrap();
        assert_eq!(s.output_shape(), &[2, 3, 3]);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a: Tensor<f64> = init_uniform(&mut rng(), &[10, 16], 16);
        let b: Tensor<f64> = init_uniform(&mut rng(), &[10, 16], 16);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn gaussian_head_clamps_log_variance() {
        let mut store = ParamStore::<f64>::new();
        let head = GaussianHead::new(&mut store, &mut rng(), "g", 1, 1);
        for id in head.params() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        store
            .set_value(head.log_var.bias, Tensor::from_vec(vec![50.0]))
            .unwrap();
        let tape = Tape::new();
        let g = head
            .forward(&tape, &store, &tape.constant(Tensor::zeros(&[1, 1])))
            .unwrap();
        assert_eq!(g.log_var.value().item(), 10.0);
        assert_eq!(g.mean.value().item(), 0.0);
    }

    #[test]
    fn mlp_dynamics_accepts_flat_and_batched_state() {
        let mut store = ParamStore::<f64>::new();
        let f = MlpDynamics::new(&mut store, &mut rng(), "f", &[3, 8, 3]);
        let tape = Tape::inference();
        let p = f.bind(&tape, &store);
        let x = Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap();
        let flat = f.eval(&p, &tape.constant(x.clone()), 0.0).unwrap();
        let batched = f
            .eval(&p, &tape.constant(x.reshape(&[1, 3]).unwrap()), 0.0)
            .unwrap();
        assert_eq!(flat.shape(), &[3]);
        assert_eq!(flat.value().data(), batched.value().data());
    }
}
