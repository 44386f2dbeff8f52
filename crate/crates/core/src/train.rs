//! Adam optimisation over shuffled mini-batches of the conditioning window,
//! with atomic checkpoints, exact resumption and evaluation against the
//! copy-last-frame baseline.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Tensor};
use crate::data::{gather_frames, FrameSource, VideoSequence};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::models::{query_grid, Checkpoint, Conditioning, Model, ModelKind, QueryMode};
use crate::ode::TimeGrid;
use crate::scalar::Real;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates aligned with the parameters of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// A non-finite gradient rejects the whole step and leaves everything
/// untouched.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid(
            "optimizer state does not match the parameter store",
        ));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let corr1 = T::one() - T::of(c.beta1.powi(t));
    let corr2 = T::one() - T::of(c.beta2.powi(t));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let ids: Vec<ParamId> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        let g = p.grad.data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales the stored gradients to global norm at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm().as_f64();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store
                .get_mut(id)
                .grad
                .data_mut()
                .iter_mut()
                .for_each(|g| *g *= s);
        }
    }
    norm
}

/// Standard normal draws for `(seed, stream)`.
pub fn noise<T: Real>(seed: u64, stream: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rand::RngExt::sample::<f64, _>(&mut rng, StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("shape matches draw count")
}

fn training_noise_stream(epoch: usize, step: u64) -> u64 {
    ((epoch as u64) << 40) ^ step
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from 1 at the first epoch towards `floor` at the
    /// last one.
    Cosine {
        floor: f64,
    },
}

impl LrSchedule {
    /// Multiplier for 1-based `epoch` of a run with `epochs` epochs.
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { floor } => {
                let progress = (epoch.max(1) - 1) as f64 / epochs.max(1) as f64;
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Text that pins the whole learning-rate history of a run, used to
    /// refuse resuming under a different one.
    pub fn identity(&self, epochs: usize) -> String {
        match self {
            LrSchedule::Constant => "constant".into(),
            LrSchedule::Cosine { .. } => format!("{self} over {epochs}"),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrSchedule::Constant => write!(f, "constant"),
            LrSchedule::Cosine { floor } => write!(f, "cosine:{floor:?}"),
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "unknown learning-rate schedule {s:?} (expected constant, cosine or cosine:FLOOR)"
            ))
        };
        match s.split_once(':') {
            None if s == "constant" => Ok(LrSchedule::Constant),
            None if s == "cosine" => Ok(LrSchedule::Cosine { floor: 0.05 }),
            Some(("cosine", floor)) => Ok(LrSchedule::Cosine {
                floor: floor.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Leading frames of each sequence used as input and target.
    pub condition: usize,
    pub clip_norm: f64,
    /// Fixed number of independently evaluated batch shards; part of the
    /// numerical definition of a step, so results do not depend on threads.
    pub shards: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Largest tolerated fraction of skipped batches per epoch.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 20,
            adam: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            seed: 0,
            condition: 10,
            clip_norm: 10.0,
            shards: 1,
            checkpoint_every: 0,
            checkpoint: None,
            log: None,
            max_skip_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.condition == 0 || self.shards == 0 {
            return Err(Error::invalid(
                "epochs, batch size, condition and shards must be at least 1",
            ));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::invalid(
                "learning rate must be finite and non-negative",
            ));
        }
        if let LrSchedule::Cosine { floor } = self.schedule {
            if !(0.0..=1.0).contains(&floor) {
                return Err(Error::invalid("cosine schedule floor must lie in [0, 1]"));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    /// Latent matching term (kind A) or KL term (kind B).
    pub regulariser: f64,
}

impl StepRecord {
    pub fn log_line(&self, kind: ModelKind) -> String {
        match kind {
            ModelKind::A => format!(
                "epoch={} step={} loss={} recon={}",
                self.epoch, self.step, self.loss, self.recon
            ),
            ModelKind::B => format!(
                "epoch={} step={} loss={} kl={} recon={}",
                self.epoch, self.step, self.loss, self.regulariser, self.recon
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// `(epoch, mean step loss, skipped batches)`.
    pub epochs: Vec<(usize, f64, usize)>,
}

/// Where a resumed run picks up.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub optimizer: OptimizerState<T>,
}

/// Model plus optimizer snapshot after `epoch` completed epochs.
pub fn training_checkpoint<T: Real>(
    model: &Model<T>,
    state: &TrainState<T>,
    cfg: &TrainConfig,
) -> Checkpoint {
    let mut ckpt = model.to_checkpoint();
    let opt = &state.optimizer;
    let meta = [
        ("train.epoch", state.epoch.to_string()),
        ("train.seed", cfg.seed.to_string()),
        ("train.condition", cfg.condition.to_string()),
        ("train.batch_size", cfg.batch_size.to_string()),
        ("train.shards", cfg.shards.to_string()),
        ("train.lr_schedule", cfg.schedule.identity(cfg.epochs)),
        ("train.adam.step", opt.step.to_string()),
        ("train.adam.lr", format!("{:?}", opt.config.lr)),
        ("train.adam.beta1", format!("{:?}", opt.config.beta1)),
        ("train.adam.beta2", format!("{:?}", opt.config.beta2)),
        ("train.adam.eps", format!("{:?}", opt.config.eps)),
    ];
    ckpt.meta
        .extend(meta.into_iter().map(|(k, v)| (k.to_string(), v)));
    for (i, (_, p)) in model.store().iter().enumerate() {
        ckpt.blocks
            .push((format!("{ADAM_M}{}", p.name), opt.m[i].cast()));
        ckpt.blocks
            .push((format!("{ADAM_V}{}", p.name), opt.v[i].cast()));
    }
    ckpt
}

/// Model and optimizer state stored by [`training_checkpoint`].
pub fn resume_from<T: Real>(ckpt: &Checkpoint) -> Result<(Model<T>, TrainState<T>)> {
    let model = Model::from_checkpoint(ckpt)?;
    let field = |k: &str| -> Result<&str> {
        ckpt.get(k)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks training key {k:?}")))
    };
    let num = |k: &str| -> Result<f64> {
        field(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad value for {k:?}")))
    };
    let config = AdamConfig {
        lr: num("train.adam.lr")?,
        beta1: num("train.adam.beta1")?,
        beta2: num("train.adam.beta2")?,
        eps: num("train.adam.eps")?,
    };
    let mut optimizer = OptimizerState::new(model.store(), config);
    optimizer.step = field("train.adam.step")?
        .parse()
        .map_err(|_| Error::Format("bad optimizer step".into()))?;
    for (i, (_, p)) in model.store().iter().enumerate() {
        for (prefix, slot) in [(ADAM_M, &mut optimizer.m[i]), (ADAM_V, &mut optimizer.v[i])] {
            let b = ckpt.block(&format!("{prefix}{}", p.name)).ok_or_else(|| {
                Error::Format(format!("checkpoint lacks optimizer moments for {}", p.name))
            })?;
            if b.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "optimizer moment shape mismatch for {}",
                    p.name
                )));
            }
            *slot = b.cast();
        }
    }
    let epoch = field("train.epoch")?
        .parse()
        .map_err(|_| Error::Format("bad epoch".into()))?;
    Ok((model, TrainState { epoch, optimizer }))
}

/// Drops log lines of epochs after `epoch`, so a resumed run appends where
/// its checkpoint left off.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            l.strip_prefix("epoch=")
                .and_then(|r| r.split_whitespace().next())
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

struct ShardResult<T: Real> {
    grads: Gradients<T>,
    loss: f64,
    recon: f64,
    regulariser: f64,
}

fn shard_gradients<T: Real>(
    model: &Model<T>,
    frames: &Tensor<T>,
    times: &TimeGrid<T>,
    eps: Option<&Tensor<T>>,
    weight: T,
) -> Result<ShardResult<T>> {
    let tape = Tape::new();
    let cond = Conditioning::new(tape.constant(frames.clone()), times.clone())?;
    let out = model.forward(&tape, &cond, times, eps)?;
    let loss = model.loss(&out, &cond)?;
    let (total, recon, reg) = (
        loss.total.value().item().as_f64(),
        loss.recon.value().item().as_f64(),
        loss.regulariser.value().item().as_f64(),
    );
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    assert!(
        recon >= 0.0 && reg >= 0.0,
        "loss terms must be non-negative"
    );
    let grads = tape.backward(&loss.total.scale(weight))?;
    Ok(ShardResult {
        grads,
        loss: total * weight.as_f64(),
        recon: recon * weight.as_f64(),
        regulariser: reg * weight.as_f64(),
    })
}

/// Rows `lo..hi` of the batch axis of a time-major `[M, B, ...]` tensor.
fn batch_rows<T: Real>(t: &Tensor<T>, lo: usize, hi: usize) -> Tensor<T> {
    let s = t.shape();
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * (hi - lo) * inner);
    for m in 0..s[0] {
        let base = m * s[1] * inner;
        data.extend_from_slice(&t.data()[base + lo * inner..base + hi * inner]);
    }
    let mut shape = s.to_vec();
    shape[1] = hi - lo;
    Tensor::new(&shape, data).expect("consistent sub-batch")
}

/// Optimises `model` on the first `cfg.condition` frames of every sequence
/// in `data`; no later frame is ever read. Continues from `resume` when given.
pub fn train<T: Real, S: FrameSource + ?Sized>(
    model: &mut Model<T>,
    data: &S,
    cfg: &TrainConfig,
    resume: Option<TrainState<T>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = data.sequences();
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if data.frames_per_sequence() < cfg.condition {
        return Err(Error::invalid(format!(
            "sequences have {} frames, fewer than the {} conditioning frames",
            data.frames_per_sequence(),
            cfg.condition
        )));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState {
            epoch: 0,
            optimizer: OptimizerState::new(model.store(), cfg.adam),
        },
    };
    let mut log = match &cfg.log {
        Some(path) => {
            if state.epoch == 0 {
                fs::write(path, "").map_err(|e| Error::io(path, e))?;
            } else {
                truncate_log(path, state.epoch)?;
            }
            Some((
                path.clone(),
                OpenOptions::new()
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?,
            ))
        }
        None => None,
    };
    let times: TimeGrid<T> = TimeGrid::uniform(cfg.condition)?;
    let d = model.latent_dim();
    let mut report = TrainReport::default();
    let mut step = state.optimizer.step;

    for epoch in state.epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        state.optimizer.config.lr = cfg.adam.lr * cfg.schedule.factor(epoch, cfg.epochs);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let (mut sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
        for batch in &batches {
            let b = batch.len();
            let frames: Tensor<T> = gather_frames(data, batch, cfg.condition)?;
            let eps = match model.kind() {
                ModelKind::B => Some(noise::<T>(
                    cfg.seed,
                    training_noise_stream(epoch, step + 1),
                    &[b, d],
                )),
                ModelKind::A => None,
            };
            let shards = cfg.shards.min(b);
            let bounds: Vec<(usize, usize)> = (0..shards)
                .map(|s| (s * b / shards, (s + 1) * b / shards))
                .collect();
            let model_ref = &*model;
            let results: Vec<Result<ShardResult<T>>> = bounds
                .par_iter()
                .map(|&(lo, hi)| {
                    let f = batch_rows(&frames, lo, hi);
                    let e = eps.as_ref().map(|e| {
                        Tensor::new(&[hi - lo, d], e.data()[lo * d..hi * d].to_vec())
                            .expect("noise rows")
                    });
                    shard_gradients(
                        model_ref,
                        &f,
                        &times,
                        e.as_ref(),
                        T::of((hi - lo) as f64 / b as f64),
                    )
                })
                .collect();
            let mut ok = Vec::with_capacity(results.len());
            let mut failure = None;
            for r in results {
                match r {
                    Ok(s) => ok.push(s),
                    Err(e) if e.is_solver_failure() => failure = Some(e),
                    Err(e) => return Err(e),
                }
            }
            if let Some(e) = failure {
                skipped += 1;
                if skipped as f64 > cfg.max_skip_fraction * batches.len() as f64 {
                    return Err(Error::invalid(format!(
                        "epoch {epoch}: {skipped} of {} batches skipped after solver failures (last: {e})",
                        batches.len()
                    )));
                }
                continue;
            }
            model.store_mut().zero_grad();
            for s in &ok {
                model.store_mut().accumulate(&s.grads);
            }
            clip_grad_norm(model.store_mut(), cfg.clip_norm);
            adam_step(model.store_mut(), &mut state.optimizer)?;
            step = state.optimizer.step;
            let rec = StepRecord {
                epoch,
                step,
                loss: ok.iter().map(|s| s.loss).sum(),
                recon: ok.iter().map(|s| s.recon).sum(),
                regulariser: ok.iter().map(|s| s.regulariser).sum(),
            };
            if let Some((path, f)) = &mut log {
                writeln!(f, "{}", rec.log_line(model.kind()))
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            sum += rec.loss;
            count += 1;
            report.steps.push(rec);
        }
        model.store_mut().zero_grad();
        report
            .epochs
            .push((epoch, sum / count.max(1) as f64, skipped));
        state.epoch = epoch;
        let due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        if let Some(path) = &cfg.checkpoint {
            if due || epoch == cfg.epochs {
                training_checkpoint(model, &state, cfg).save(path)?;
            }
        }
    }
    Ok(report)
}

/// Frames and latents decoded along a query grid for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub times: Vec<f64>,
    /// `[K, 1, H, W]`, clamped to `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `[K, D]`.
    pub latents: Tensor<f64>,
}

/// Conditions on the first `condition` frames of `seq` and decodes along the
/// grid `mode` derives from them. `eps: [1, D]` selects a posterior sample
/// (kind B); `None` follows the posterior mean.
pub fn forecast<T: Real>(
    model: &Model<T>,
    seq: &VideoSequence,
    condition: usize,
    mode: QueryMode,
    eps: Option<&Tensor<T>>,
) -> Result<Forecast> {
    if condition == 0 || condition > seq.len() {
        return Err(Error::invalid(format!(
            "cannot condition on {condition} of {} frames",
            seq.len()
        )));
    }
    let frames: Tensor<T> = gather_frames(std::slice::from_ref(seq), &[0], condition)?;
    let times = TimeGrid::new(
        seq.times().times()[..condition]
            .iter()
            .map(|&t| T::of(t))
            .collect(),
    )?;
    let query = query_grid(&times, mode)?;
    let (x, z) = model.predict(&frames, &times, &query, eps)?;
    let (h, w) = (seq.height(), seq.width());
    let k = query.len();
    let frames = Tensor::new(
        &[k, 1, h, w],
        x.data()
            .iter()
            .map(|v| v.as_f64().clamp(0.0, 1.0) as f32)
            .collect(),
    )?;
    let latents = Tensor::new(&[k, model.latent_dim()], z.to_f64_vec())?;
    Ok(Forecast {
        times: query.times().iter().map(|t| t.as_f64()).collect(),
        frames,
        latents,
    })
}

/// Reconstructs the first `condition` frames, extrapolates `horizon` more
/// along the posterior mean and scores both windows against the truth and the
/// copy-last-frame baseline.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &[VideoSequence],
    condition: usize,
    horizon: usize,
) -> Result<MetricReport> {
    if let Some(s) = data.iter().find(|s| s.len() < condition + horizon) {
        return Err(Error::invalid(format!(
            "horizon {horizon} after {condition} conditioning frames exceeds the {} frames available",
            s.len()
        )));
    }
    let preds: Vec<Tensor<f32>> = data
        .par_iter()
        .map(|s| {
            forecast(
                model,
                s,
                condition,
                QueryMode::Extrapolate { horizon },
                None,
            )
            .map(|f| f.frames)
        })
        .collect::<Result<_>>()?;
    MetricReport::compute(data, &preds, condition)
}
