//! The two latent ODE video models and their training objectives.
//!
//! * Kind A encodes the first frame alone, integrates the latent dynamics from
//!   it and decodes every trajectory row independently; its loss adds a pixel
//!   reconstruction term and a latent matching term between the trajectory and
//!   the per-frame encodings.
//! * Kind B reads the conditioning frames with a recurrent encoder into a
//!   diagonal Gaussian posterior, samples the initial latent by
//!   reparameterisation and minimises the negative evidence lower bound.
//!
//! Batches are time-major: frames `[T, B, 1, H, W]`, trajectories `[K, B, D]`.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, GaussianHead, Layer, MlpDynamics, RnnCell, Sequential};
use crate::ode::{integrate_tracked, GradientMode, Method, SolverConfig, TimeGrid};
use crate::scalar::Real;

pub use crate::nn::GaussianLatent;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Deterministic single-frame encoder.
    A,
    /// Variational recurrent encoder.
    B,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::A => "A",
            ModelKind::B => "B",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ModelKind::A),
            "B" | "b" => Ok(ModelKind::B),
            other => Err(Error::invalid(format!(
                "unknown model kind {other:?} (expected A or B)"
            ))),
        }
    }
}

/// Layer sizes shared by both kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    /// Encoder conv channels; the decoder runs them in reverse.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Latent dimension `D`.
    pub latent: usize,
    pub dynamics_hidden: Vec<usize>,
    /// Hidden width of the recurrent encoder (kind B only).
    pub rnn_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            height: 32,
            width: 32,
            channels: vec![16, 32, 64],
            kernel: 4,
            stride: 2,
            pad: 1,
            latent: 32,
            dynamics_hidden: vec![64, 64],
            rnn_hidden: 64,
        }
    }
}

impl Architecture {
    /// 4×4 frames, one conv stage, `D = 3`: small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny() -> Self {
        Architecture {
            height: 4,
            width: 4,
            channels: vec![2],
            kernel: 4,
            stride: 2,
            pad: 1,
            latent: 3,
            dynamics_hidden: vec![4],
            rnn_hidden: 4,
        }
    }
}

/// Everything needed to rebuild a model besides its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub arch: Architecture,
    /// Weight of the latent matching term (kind A).
    pub latent_weight: f64,
    pub solver: SolverConfig<f64>,
    pub gradient: GradientMode,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, arch: Architecture) -> Self {
        ModelConfig {
            kind,
            arch,
            latent_weight: 1.0,
            solver: SolverConfig::default(),
            gradient: GradientMode::Adjoint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.latent == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if a.height == 0 || a.width == 0 || a.channels.is_empty() || a.channels.contains(&0) {
            return Err(Error::invalid(
                "frame size and conv channels must be positive",
            ));
        }
        if a.kernel == 0 || a.stride == 0 || a.dynamics_hidden.contains(&0) || a.rnn_hidden == 0 {
            return Err(Error::invalid(
                "kernel, stride and hidden widths must be positive",
            ));
        }
        if !(self.latent_weight >= 0.0 && self.latent_weight.is_finite()) {
            return Err(Error::invalid(
                "latent weight must be a finite non-negative number",
            ));
        }
        self.solver.validate()
    }

    fn list(v: &[usize]) -> String {
        v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }

    /// Flat `key = value` form stored in checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let a = &self.arch;
        let s = &self.solver;
        [
            ("kind", self.kind.to_string()),
            ("height", a.height.to_string()),
            ("width", a.width.to_string()),
            ("channels", Self::list(&a.channels)),
            ("kernel", a.kernel.to_string()),
            ("stride", a.stride.to_string()),
            ("pad", a.pad.to_string()),
            ("latent", a.latent.to_string()),
            ("dynamics_hidden", Self::list(&a.dynamics_hidden)),
            ("rnn_hidden", a.rnn_hidden.to_string()),
            ("latent_weight", format!("{:?}", self.latent_weight)),
            ("solver.method", s.method.to_string()),
            ("solver.step", format!("{:?}", s.step)),
            ("solver.rtol", format!("{:?}", s.rtol)),
            ("solver.atol", format!("{:?}", s.atol)),
            ("solver.max_steps", s.max_steps.to_string()),
            ("gradient", self.gradient.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks key {k:?}")))
        };
        fn num<V: FromStr>(k: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad value {v:?} for {k:?}")))
        }
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|x| num(k, x)).collect()
        };
        let n = |k: &str| -> Result<usize> { num(k, get(k)?) };
        let f = |k: &str| -> Result<f64> { num(k, get(k)?) };
        let cfg = ModelConfig {
            kind: get("kind")?.parse()?,
            arch: Architecture {
                height: n("height")?,
                width: n("width")?,
                channels: list("channels")?,
                kernel: n("kernel")?,
                stride: n("stride")?,
                pad: n("pad")?,
                latent: n("latent")?,
                dynamics_hidden: list("dynamics_hidden")?,
                rnn_hidden: n("rnn_hidden")?,
            },
            latent_weight: f("latent_weight")?,
            solver: SolverConfig {
                method: get("solver.method")?.parse::<Method>()?,
                step: f("solver.step")?,
                rtol: f("solver.rtol")?,
                atol: f("solver.atol")?,
                max_steps: n("solver.max_steps")?,
            },
            gradient: get("gradient")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cast_solver<T: Real>(s: &SolverConfig<f64>) -> SolverConfig<T> {
    SolverConfig {
        method: s.method,
        step: T::of(s.step),
        rtol: T::of(s.rtol),
        atol: T::of(s.atol),
        max_steps: s.max_steps,
    }
}

/// Observed frames `[M, B, 1, H, W]` with their shared times.
#[derive(Clone, Debug)]
pub struct Conditioning<'t, T: Real> {
    pub frames: Var<'t, T>,
    pub times: TimeGrid<T>,
}

impl<'t, T: Real> Conditioning<'t, T> {
    pub fn new(frames: Var<'t, T>, times: TimeGrid<T>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 5 || s[2] != 1 || s[0] != times.len() || s[0] == 0 {
            return Err(Error::invalid(format!(
                "conditioning frames {s:?} must be [M, B, 1, H, W] with M = {} times",
                times.len()
            )));
        }
        Ok(Conditioning { frames, times })
    }

    pub fn batch(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Latents `[K, B, D]` at `times`, all from one solve starting at row 0.
#[derive(Clone, Debug)]
pub struct LatentTrajectory<'t, T: Real> {
    pub latents: Var<'t, T>,
    pub times: TimeGrid<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<'t, T: Real> {
    /// Decoded frames `[K, B, 1, H, W]`.
    pub frames: Var<'t, T>,
    pub trajectory: LatentTrajectory<'t, T>,
    /// Encodings of every observed frame `[M, B, D]` (kind A).
    pub encodings: Option<Var<'t, T>>,
    /// Approximate posterior over the initial latent (kind B).
    pub posterior: Option<GaussianLatent<'t, T>>,
}

/// Objective with its components, each already averaged over the batch.
#[derive(Clone, Debug)]
pub struct Loss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub recon: Var<'t, T>,
    /// Latent matching term (kind A) or KL term (kind B).
    pub regulariser: Var<'t, T>,
}

/// Row of `query` holding each observed time.
pub fn observed_rows<T: Real>(query: &TimeGrid<T>, observed: &TimeGrid<T>) -> Result<Vec<usize>> {
    observed
        .times()
        .iter()
        .map(|&t| {
            query.position(t).ok_or_else(|| {
                Error::invalid(format!(
                    "observed time {} is not on the query grid",
                    t.as_f64()
                ))
            })
        })
        .collect()
}

fn squared_error<'t, T: Real>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "squared error",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.sub(b)?.square().sum())
}

/// Deterministic objective
/// `(1/B) Σ_b Σ_i ‖x_i − x̂_i‖² + λ‖q(x_i) − z(t_i)‖²`, with `rows[i]` the
/// query row of observation `i`.
pub fn loss_a<'t, T: Real>(
    out: &ForwardOutput<'t, T>,
    cond: &Conditioning<'t, T>,
    latent_weight: T,
) -> Result<Loss<'t, T>> {
    let rows = observed_rows(&out.trajectory.times, &cond.times)?;
    let enc = out
        .encodings
        .as_ref()
        .ok_or_else(|| Error::invalid("latent matching loss needs per-frame encodings"))?;
    let inv_b = T::one() / T::of(cond.batch() as f64);
    let recon = squared_error(&cond.frames, &out.frames.gather(&rows)?)?.scale(inv_b);
    let latent = squared_error(enc, &out.trajectory.latents.gather(&rows)?)?.scale(inv_b);
    Ok(Loss {
        total: recon.add(&latent.scale(latent_weight))?,
        recon,
        regulariser: latent,
    })
}

/// Negative evidence lower bound with unit decoder variance:
/// `(1/B) Σ_b [½ Σ_i ‖x_i − x̂_i‖² + KL(q ‖ N(0, I))]`.
pub fn loss_b<'t, T: Real>(
    out: &ForwardOutput<'t, T>,
    cond: &Conditioning<'t, T>,
) -> Result<Loss<'t, T>> {
    let rows = observed_rows(&out.trajectory.times, &cond.times)?;
    let post = out
        .posterior
        .as_ref()
        .ok_or_else(|| Error::invalid("evidence bound needs a posterior"))?;
    let inv_b = T::one() / T::of(cond.batch() as f64);
    let recon = squared_error(&cond.frames, &out.frames.gather(&rows)?)?.scale(T::of(0.5) * inv_b);
    let kl = post.kl_standard_normal()?.sum().scale(inv_b);
    Ok(Loss {
        total: recon.add(&kl)?,
        recon,
        regulariser: kl,
    })
}

/// How [`query_grid`] extends the conditioning times.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    /// `horizon` further steps at the last conditioning spacing.
    Extrapolate { horizon: usize },
    /// `factor − 1` evenly spaced times inside every conditioning interval.
    Interpolate { factor: usize },
}

pub fn query_grid<T: Real>(times: &TimeGrid<T>, mode: QueryMode) -> Result<TimeGrid<T>> {
    let ts = times.times();
    match mode {
        QueryMode::Extrapolate { horizon } => {
            let dt = if ts.len() >= 2 {
                ts[ts.len() - 1] - ts[ts.len() - 2]
            } else {
                T::one()
            };
            let last = times.last();
            let mut out = ts.to_vec();
            out.extend((1..=horizon).map(|k| last + dt * T::of(k as f64)));
            TimeGrid::new(out)
        }
        QueryMode::Interpolate { factor } => {
            if factor < 2 {
                return Err(Error::invalid(format!(
                    "interpolation factor must be at least 2, got {factor}"
                )));
            }
            let mut out = vec![ts[0]];
            for w in ts.windows(2) {
                for j in 1..=factor {
                    out.push(if j == factor {
                        w[1]
                    } else {
                        w[0] + (w[1] - w[0]) * T::of(j as f64 / factor as f64)
                    });
                }
            }
            TimeGrid::new(out)
        }
    }
}

/// Latent ODE video model; see the module docs for the two kinds.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Sequential,
    dynamics: MlpDynamics,
    decoder: Sequential,
    rnn: Option<RnnCell>,
    head: Option<GaussianHead>,
    solver: SolverConfig<T>,
}

/// Initial output-layer bias, `sigmoid(-3) ≈ 0.05`.
const OUTPUT_LOGIT_INIT: f64 = -3.0;

impl<T: Real> Model<T> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let a = &config.arch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut enc_layers = Vec::new();
        let mut shape = vec![1, a.height, a.width];
        let mut c_in = 1;
        for (i, &c) in a.channels.iter().enumerate() {
            let conv = crate::nn::Conv2d::new(
                &mut store,
                &mut rng,
                &format!("encoder.conv{i}"),
                c_in,
                c,
                a.kernel,
                a.stride,
                a.pad,
            );
            let layer = Layer::Conv2d(conv);
            shape = layer.output_shape(&shape).ok_or_else(|| {
                Error::invalid(format!(
                    "conv stage {i} (k={}, s={}, p={}) does not tile a {:?} input",
                    a.kernel, a.stride, a.pad, shape
                ))
            })?;
            enc_layers.push(layer);
            enc_layers.push(Layer::Activation(Activation::Relu));
            c_in = c;
        }
        let feature_shape = shape.clone();
        let flat: usize = feature_shape.iter().product();
        enc_layers.push(Layer::Reshape(vec![flat]));
        enc_layers.push(Layer::Dense(Dense::new(
            &mut store,
            &mut rng,
            "encoder.dense",
            flat,
            a.latent,
        )));
        let encoder = Sequential::new(&[1, a.height, a.width], enc_layers)?;

        let (rnn, head) = match config.kind {
            ModelKind::A => (None, None),
            ModelKind::B => (
                Some(RnnCell::new(
                    &mut store,
                    &mut rng,
                    "rnn",
                    a.latent,
                    a.rnn_hidden,
                )),
                Some(GaussianHead::new(
                    &mut store,
                    &mut rng,
                    "head",
                    a.rnn_hidden,
                    a.latent,
                )),
            ),
        };

        let mut dims = vec![a.latent];
        dims.extend_from_slice(&a.dynamics_hidden);
        dims.push(a.latent);
        let dynamics = MlpDynamics::new(&mut store, &mut rng, "dynamics", &dims);

        let mut dec_layers = vec![
            Layer::Dense(Dense::new(
                &mut store,
                &mut rng,
                "decoder.dense",
                a.latent,
                flat,
            )),
            Layer::Activation(Activation::Relu),
            Layer::Reshape(feature_shape),
        ];
        let mut outs: Vec<usize> = a.channels.iter().rev().skip(1).copied().collect();
        outs.push(1);
        let mut c_in = *a.channels.last().expect("non-empty channels");
        for (i, &c) in outs.iter().enumerate() {
            let layer = crate::nn::ConvTranspose2d::new(
                &mut store,
                &mut rng,
                &format!("decoder.deconv{i}"),
                c_in,
                c,
                a.kernel,
                a.stride,
                a.pad,
            );
            if i + 1 == outs.len() {
                // Start from a dark frame. Mid-grey output makes the first
                // updates drive the sigmoid into saturation before the
                // decoder has learned to use the latent.
                store.set_value(layer.bias, Tensor::full(&[c], T::of(OUTPUT_LOGIT_INIT)))?;
            }
            dec_layers.push(Layer::ConvTranspose2d(layer));
            dec_layers.push(Layer::Activation(if i + 1 == outs.len() {
                Activation::Sigmoid
            } else {
                Activation::Relu
            }));
            c_in = c;
        }
        let decoder = Sequential::new(&[a.latent], dec_layers)?;
        if decoder.output_shape() != [1, a.height, a.width] {
            return Err(Error::invalid(format!(
                "decoder produces {:?} instead of [1, {}, {}]",
                decoder.output_shape(),
                a.height,
                a.width
            )));
        }
        let solver = cast_solver(&config.solver);
        Ok(Model {
            config,
            store,
            encoder,
            dynamics,
            decoder,
            rnn,
            head,
            solver,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> &Architecture {
        &self.config.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.config.arch.latent
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn dynamics(&self) -> &MlpDynamics {
        &self.dynamics
    }

    pub fn solver(&self) -> &SolverConfig<T> {
        &self.solver
    }

    /// Replaces the solver used by every subsequent forward pass.
    pub fn set_solver(&mut self, solver: SolverConfig<f64>) -> Result<()> {
        solver.validate()?;
        self.solver = cast_solver(&solver);
        self.config.solver = solver;
        Ok(())
    }

    pub fn set_gradient_mode(&mut self, mode: GradientMode) {
        self.config.gradient = mode;
    }

    /// Parameters by role: `encoder` (including the recurrent part and the
    /// posterior head), `dynamics` and `decoder`.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut enc = self.encoder.params();
        if let (Some(r), Some(h)) = (&self.rnn, &self.head) {
            enc.extend(r.params());
            enc.extend(h.params());
        }
        vec![
            ("encoder", enc),
            ("dynamics", self.dynamics.params().to_vec()),
            ("decoder", self.decoder.params()),
        ]
    }

    /// `[N, 1, H, W] → [N, D]`, one frame at a time.
    pub fn encode_frames<'t>(&self, tape: &'t Tape<T>, frames: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.encoder.forward(tape, &self.store, frames)
    }

    /// `[N, D] → [N, 1, H, W]`; row `j` of the output depends on row `j` only.
    pub fn decode<'t>(&self, tape: &'t Tape<T>, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.decoder.forward(tape, &self.store, z)
    }

    /// Per-frame encodings `[M, B, D]` of `[M, B, 1, H, W]`.
    fn encode_sequence<'t>(&self, tape: &'t Tape<T>, frames: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = frames.shape().to_vec();
        let flat = frames.reshape(&[s[0] * s[1], s[2], s[3], s[4]])?;
        self.encode_frames(tape, &flat)?
            .reshape(&[s[0], s[1], self.latent_dim()])
    }

    /// Posterior over the initial latent from the conditioning frames, read in
    /// time order by the recurrent encoder (kind B).
    pub fn encode_posterior<'t>(
        &self,
        tape: &'t Tape<T>,
        cond: &Conditioning<'t, T>,
    ) -> Result<GaussianLatent<'t, T>> {
        let (Some(rnn), Some(head)) = (&self.rnn, &self.head) else {
            return Err(Error::invalid("model kind A has no recurrent posterior"));
        };
        let feats = self.encode_sequence(tape, &cond.frames)?;
        let steps: Vec<Var<'t, T>> = (0..feats.shape()[0])
            .map(|i| feats.select(i))
            .collect::<Result<_>>()?;
        let h = rnn.run(
            tape,
            &self.store,
            &rnn.zero_state(tape, cond.batch()),
            &steps,
        )?;
        head.forward(tape, &self.store, &h)
    }

    /// Trajectory `[K, B, D]` from `z0: [B, D]` over `query`.
    pub fn integrate<'t>(
        &self,
        tape: &'t Tape<T>,
        z0: &Var<'t, T>,
        query: &TimeGrid<T>,
    ) -> Result<LatentTrajectory<'t, T>> {
        let params = self.dynamics.bind(tape, &self.store);
        let latents = integrate_tracked(
            &self.dynamics,
            &params,
            z0,
            query,
            &self.solver,
            self.config.gradient,
        )?;
        Ok(LatentTrajectory {
            latents,
            times: query.clone(),
        })
    }

    /// Decodes `[K, B, D]` into `[K, B, 1, H, W]`.
    pub fn decode_trajectory<'t>(
        &self,
        tape: &'t Tape<T>,
        latents: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = latents.shape().to_vec();
        let a = &self.config.arch;
        let frames = self.decode(tape, &latents.reshape(&[s[0] * s[1], s[2]])?)?;
        frames.reshape(&[s[0], s[1], 1, a.height, a.width])
    }

    /// Runs the model over `query`, which must start at the first conditioning
    /// time. `eps: [B, D]` is the reparameterisation noise for kind B (`None`
    /// follows the posterior mean); kind A ignores it.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        cond: &Conditioning<'t, T>,
        query: &TimeGrid<T>,
        eps: Option<&Tensor<T>>,
    ) -> Result<ForwardOutput<'t, T>> {
        let a = &self.config.arch;
        let fs = cond.frames.shape();
        if fs[3] != a.height || fs[4] != a.width {
            return Err(Error::Shape {
                op: "model input frames",
                lhs: vec![a.height, a.width],
                rhs: fs[3..].to_vec(),
            });
        }
        if query.first() != cond.times.first() {
            return Err(Error::invalid(
                "query times must start at the first conditioning time",
            ));
        }
        let b = cond.batch();
        let (z0, encodings, posterior) = match self.config.kind {
            ModelKind::A => {
                let enc = self.encode_sequence(tape, &cond.frames)?;
                (enc.select(0)?, Some(enc), None)
            }
            ModelKind::B => {
                let post = self.encode_posterior(tape, cond)?;
                let z0 = match eps {
                    Some(e) => {
                        if e.shape() != [b, a.latent] {
                            return Err(Error::Shape {
                                op: "reparameterisation noise",
                                lhs: vec![b, a.latent],
                                rhs: e.shape().to_vec(),
                            });
                        }
                        post.sample(e)?
                    }
                    None => post.mean.clone(),
                };
                (z0, None, Some(post))
            }
        };
        let trajectory = self.integrate(tape, &z0, query)?;
        let frames = self.decode_trajectory(tape, &trajectory.latents)?;
        Ok(ForwardOutput {
            frames,
            trajectory,
            encodings,
            posterior,
        })
    }

    /// The kind's training objective on the conditioning window.
    pub fn loss<'t>(
        &self,
        out: &ForwardOutput<'t, T>,
        cond: &Conditioning<'t, T>,
    ) -> Result<Loss<'t, T>> {
        match self.config.kind {
            ModelKind::A => loss_a(out, cond, T::of(self.config.latent_weight)),
            ModelKind::B => loss_b(out, cond),
        }
    }

    /// Decoded frames `[K, B, 1, H, W]` and latents `[K, B, D]` along `query`
    /// without recording gradients.
    pub fn predict(
        &self,
        frames: &Tensor<T>,
        times: &TimeGrid<T>,
        query: &TimeGrid<T>,
        eps: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::inference();
        let cond = Conditioning::new(tape.constant(frames.clone()), times.clone())?;
        let out = self.forward(&tape, &cond, query, eps)?;
        Ok((
            out.frames.value().clone(),
            out.trajectory.latents.value().clone(),
        ))
    }

    /// Snapshot of the configuration and every parameter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let blocks = self
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.cast::<f64>()))
            .collect();
        Checkpoint {
            kind: self.config.kind,
            meta: self.config.to_pairs().into_iter().collect(),
            blocks,
        }
    }

    /// Rebuilds the model described by `ckpt`; every parameter must be present
    /// with its declared shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_pairs(&ckpt.meta)?;
        if config.kind != ckpt.kind {
            return Err(Error::Format(
                "checkpoint kind byte disagrees with its header".into(),
            ));
        }
        let mut model = Model::new(config, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let value = ckpt
                .block(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name:?}")))?;
            model
                .store
                .set_value(id, value.cast())
                .map_err(|e| Error::Format(format!("parameter {name:?}: {e}")))?;
        }
        Ok(model)
    }
}
