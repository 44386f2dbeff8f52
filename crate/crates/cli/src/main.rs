mod config;
mod export;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use vidode::data::{read_mmv1, write_mmv1, DatasetSpec, SpriteSource, VideoSequence};
use vidode::metrics::MetricReport;
use vidode::models::{Architecture, Checkpoint, Model, ModelConfig, ModelKind, QueryMode};
use vidode::ode::{GradientMode, Method, SolverConfig};
use vidode::train::{
    self, evaluate, forecast, noise, resume_from, AdamConfig, Forecast, LrSchedule, TrainConfig,
};

use config::Resolver;

/// Failure reported as `error: <code>: <message>`.
#[derive(Debug)]
pub struct CliError {
    code: &'static str,
    message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }
}

impl From<vidode::Error> for CliError {
    fn from(e: vidode::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "vidode",
    version,
    about = "Latent ODE video models: data, training, prediction, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic moving-sprite dataset
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and loss log
    Train(TrainArgs),
    /// Reconstruct the conditioning frames and extrapolate past them
    Predict(PredictArgs),
    /// Decode frames at fractional times between the conditioning frames
    Interpolate(InterpolateArgs),
    /// Score reconstructions and forecasts against the copy-last baseline
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// File of `key = value` settings; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of sequences
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Square frame side in pixels
    #[arg(long)]
    size: Option<usize>,
    /// Sprites per sequence (1 or 2)
    #[arg(long)]
    digits: Option<usize>,
    /// `blob` or `idx`
    #[arg(long)]
    source: Option<String>,
    /// IDX image file used by `--source idx`
    #[arg(long)]
    idx: Option<String>,
    #[arg(long)]
    sprite_size: Option<usize>,
    #[arg(long)]
    speed_min: Option<f64>,
    #[arg(long)]
    speed_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `A` (deterministic) or `B` (variational)
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `constant`, `cosine` or `cosine:FLOOR` (decay to FLOOR·lr, default 0.05)
    #[arg(long)]
    lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_ckpt: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Leading frames used for training
    #[arg(long)]
    condition: Option<usize>,
    /// Weight of the latent matching term (model A)
    #[arg(long)]
    lambda: Option<f64>,
    /// Encoder channels, comma separated
    #[arg(long)]
    channels: Option<String>,
    /// Hidden widths of the dynamics network, comma separated
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    rnn_hidden: Option<usize>,
    /// `dopri5`, `rk4` or `euler`
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    /// Step size of the fixed-step methods
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// `adjoint` or `backprop`
    #[arg(long)]
    gradient: Option<GradientMode>,
    /// Batch shards run in parallel; part of the result's identity
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Loss log path (default: checkpoint path with a `.log` extension)
    #[arg(long)]
    log: Option<String>,
    /// Largest tolerated fraction of skipped batches per epoch
    #[arg(long)]
    max_skip: Option<f64>,
    /// Continue from the checkpoint at `--out-ckpt`
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferenceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    condition: Option<usize>,
    /// Only the first N sequences of the dataset
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    out_dir: Option<String>,
}

#[derive(Args)]
struct SamplingArgs {
    /// Posterior samples per sequence (model B)
    #[arg(long)]
    samples: Option<usize>,
    /// Follow the posterior mean instead of sampling (model B)
    #[arg(long)]
    mean: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: InferenceArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    common: InferenceArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Output frames per conditioning interval
    #[arg(long)]
    factor: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: InferenceArgs,
    #[arg(long)]
    horizon: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => e.exit(),
            _ => {
                let text = e.to_string();
                let first = text.lines().next().unwrap_or("bad arguments");
                eprintln!("error: usage: {}", first.trim_start_matches("error: "));
                return ExitCode::from(2);
            }
        },
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.code, e.message);
            ExitCode::FAILURE
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad list {v:?} for --{key}")))
        })
        .collect()
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let d = DatasetSpec::default();
    let n = r.get("n", a.n, d.sequences)?;
    let frames = r.get("frames", a.frames, d.frames)?;
    let size = r.get("size", a.size, d.height)?;
    let digits = r.get("digits", a.digits, d.sprites)?;
    let source = r.get("source", a.source, "blob".to_string())?;
    let idx = r.optional::<String>("idx", a.idx)?;
    let sprite = r.get(
        "sprite-size",
        a.sprite_size,
        if source == "idx" { 28.min(size / 2) } else { 8 },
    )?;
    let speed_min = r.get("speed-min", a.speed_min, d.speed_min)?;
    let speed_max = r.get("speed-max", a.speed_max, d.speed_max)?;
    let seed = r.get("seed", a.seed, d.seed)?;
    let out = r.required::<String>("out", a.out)?;
    r.finish("gen-data")?;

    let source = match source.as_str() {
        "blob" => SpriteSource::Blob { size: sprite },
        "idx" => SpriteSource::Idx {
            path: idx
                .ok_or_else(|| CliError::usage("--source idx needs --idx <file>"))?
                .into(),
            size: sprite,
        },
        other => {
            return Err(CliError::usage(format!(
                "unknown source {other:?} (expected blob or idx)"
            )))
        }
    };
    let spec = DatasetSpec {
        sequences: n,
        frames,
        height: size,
        width: size,
        sprites: digits,
        speed_min,
        speed_max,
        seed,
        source,
    };
    let data = vidode::data::generate(&spec)?;
    let out = Path::new(&out);
    write_mmv1(out, &data)?;
    let bytes = fs::metadata(out)
        .map_err(|e| CliError::new("io", format!("{}: {e}", out.display())))?
        .len();
    println!("sequences={n} frames={frames} height={size} width={size} bytes={bytes}");
    Ok(())
}

fn load_data(path: &str) -> Result<Vec<VideoSequence>> {
    Ok(read_mmv1(Path::new(path))?)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let dt = TrainConfig::default();
    let arch = Architecture::default();
    let solver = SolverConfig::<f64>::default();
    let kind = r.get("model", a.model, ModelKind::B)?;
    let data_path = r.required::<String>("data", a.data)?;
    let epochs = r.get("epochs", a.epochs, dt.epochs)?;
    let lr = r.get("lr", a.lr, dt.adam.lr)?;
    let schedule = r.get("lr-schedule", a.lr_schedule, dt.schedule)?;
    let latent = r.get("latent-dim", a.latent_dim, arch.latent)?;
    let seed = r.get("seed", a.seed, dt.seed)?;
    let ckpt = r.required::<String>("out-ckpt", a.out_ckpt)?;
    let batch_size = r.get("batch-size", a.batch_size, dt.batch_size)?;
    let condition = r.get("condition", a.condition, dt.condition)?;
    let lambda = r.get("lambda", a.lambda, 1.0)?;
    let channels = r.get("channels", a.channels, join(&arch.channels))?;
    let hidden = r.get("hidden", a.hidden, join(&arch.dynamics_hidden))?;
    let rnn_hidden = r.get("rnn-hidden", a.rnn_hidden, arch.rnn_hidden)?;
    let method = r.get("method", a.method, solver.method)?;
    let rtol = r.get("rtol", a.rtol, solver.rtol)?;
    let atol = r.get("atol", a.atol, solver.atol)?;
    let step = r.get("step", a.step, solver.step)?;
    let max_steps = r.get("max-steps", a.max_steps, solver.max_steps)?;
    let gradient = r.get("gradient", a.gradient, GradientMode::Adjoint)?;
    let shards = r.get("shards", a.shards, dt.shards)?;
    let clip = r.get("clip", a.clip, dt.clip_norm)?;
    let every = r.get("checkpoint-every", a.checkpoint_every, 1)?;
    let log = r.get(
        "log",
        a.log,
        Path::new(&ckpt)
            .with_extension("log")
            .to_string_lossy()
            .into_owned(),
    )?;
    let max_skip = r.get("max-skip", a.max_skip, dt.max_skip_fraction)?;
    let resume = r.switch("resume", a.resume)?;
    r.finish("train")?;

    let data = load_data(&data_path)?;
    let first = data
        .first()
        .ok_or_else(|| CliError::new("invalid", "dataset is empty"))?;
    let cfg = TrainConfig {
        epochs,
        batch_size,
        adam: AdamConfig { lr, ..dt.adam },
        schedule,
        seed,
        condition,
        clip_norm: clip,
        shards,
        checkpoint_every: every,
        checkpoint: Some(PathBuf::from(&ckpt)),
        log: Some(PathBuf::from(&log)),
        max_skip_fraction: max_skip,
    };
    let (mut model, state) = if resume {
        let saved = Checkpoint::load(Path::new(&ckpt))?;
        for (key, want) in [
            ("train.seed", seed.to_string()),
            ("train.batch_size", batch_size.to_string()),
            ("train.condition", condition.to_string()),
            ("train.shards", shards.to_string()),
            ("train.lr_schedule", schedule.identity(epochs)),
        ] {
            if saved.get(key) != Some(want.as_str()) {
                return Err(CliError::new(
                    "invalid",
                    format!(
                        "cannot resume: {key} is {:?} in the checkpoint but {want} now",
                        saved.get(key)
                    ),
                ));
            }
        }
        let (model, state) = resume_from::<f64>(&saved)?;
        println!("resumed at epoch {}", state.epoch);
        (model, Some(state))
    } else {
        let mc = ModelConfig {
            kind,
            arch: Architecture {
                height: first.height(),
                width: first.width(),
                channels: parse_list("channels", &channels)?,
                latent,
                dynamics_hidden: parse_list("hidden", &hidden)?,
                rnn_hidden,
                ..arch
            },
            latent_weight: lambda,
            solver: SolverConfig {
                method,
                step,
                rtol,
                atol,
                max_steps,
            },
            gradient,
        };
        (Model::<f64>::new(mc, seed)?, None)
    };
    let report = train::train(&mut model, data.as_slice(), &cfg, state)?;
    for (epoch, mean, skipped) in &report.epochs {
        println!("epoch={epoch} mean_loss={mean} skipped={skipped}");
    }
    Ok(())
}

struct Loaded {
    model: Model<f64>,
    data: Vec<VideoSequence>,
    condition: usize,
    out_dir: Option<PathBuf>,
}

/// Shared inference settings; `extra` resolves the subcommand's own keys
/// before the output directory.
fn load_inference(
    r: &mut Resolver,
    a: InferenceArgs,
    extra: impl FnOnce(&mut Resolver) -> Result<()>,
) -> Result<Loaded> {
    let ckpt = r.required::<String>("ckpt", a.ckpt)?;
    let data = r.required::<String>("data", a.data)?;
    let condition = r.get("condition", a.condition, 10)?;
    let limit = r.optional::<usize>("limit", a.limit)?;
    let rtol = r.get("rtol", a.rtol, 1e-7)?;
    let atol = r.get("atol", a.atol, 1e-9)?;
    extra(r)?;
    let out_dir = r.optional::<String>("out-dir", a.out_dir)?;

    let mut model = Model::<f64>::from_checkpoint(&Checkpoint::load(Path::new(&ckpt))?)?;
    model.set_solver(SolverConfig {
        max_steps: model.config().solver.max_steps,
        ..SolverConfig::dopri5(rtol, atol)
    })?;
    let mut data = load_data(&data)?;
    if let Some(n) = limit {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(CliError::new("invalid", "no sequences to process"));
    }
    Ok(Loaded {
        model,
        data,
        condition,
        out_dir: out_dir.map(PathBuf::from),
    })
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))
}

struct Sampling {
    samples: usize,
    mean: bool,
    seed: u64,
}

fn resolve_sampling(r: &mut Resolver, a: &SamplingArgs) -> Result<Sampling> {
    Ok(Sampling {
        samples: r.get("samples", a.samples, 1)?,
        mean: r.switch("mean", a.mean)?,
        seed: r.get("seed", a.seed, 0)?,
    })
}

/// Every requested forecast, sequence-major then sample.
fn forecasts(l: &Loaded, s: &Sampling, mode: QueryMode) -> Result<Vec<Vec<Forecast>>> {
    if s.samples == 0 {
        return Err(CliError::usage("--samples must be at least 1"));
    }
    if l.model.kind() == ModelKind::A && s.samples > 1 {
        return Err(CliError::new(
            "invalid",
            "model A is deterministic; --samples must be 1",
        ));
    }
    if s.mean && s.samples > 1 {
        return Err(CliError::usage("--mean draws no samples; drop --samples"));
    }
    let d = l.model.latent_dim();
    let sampled = l.model.kind() == ModelKind::B && !s.mean;
    Ok(l.data
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            (0..s.samples)
                .map(|k| {
                    // Disjoint from the training noise streams.
                    let stream = (1 << 63) | ((i as u64) << 32) | k as u64;
                    let eps = sampled.then(|| noise::<f64>(s.seed, stream, &[1, d]));
                    forecast(&l.model, seq, l.condition, mode, eps.as_ref())
                })
                .collect::<vidode::Result<Vec<_>>>()
        })
        .collect::<vidode::Result<Vec<_>>>()?)
}

/// Writes every frame as `seq<i>_<tag><j>[_s<k>].pgm` plus one strip per
/// sample with the ground truth above the prediction.
fn export(dir: &Path, data: &[VideoSequence], all: &[Vec<Forecast>], tag: &str) -> Result<usize> {
    make_dir(dir)?;
    let written: Vec<usize> = all
        .par_iter()
        .enumerate()
        .map(|(i, per_seq)| {
            let truth = &data[i];
            let (h, w) = (truth.height(), truth.width());
            let mut count = 0;
            for (k, f) in per_seq.iter().enumerate() {
                let suffix = if per_seq.len() > 1 {
                    format!("_s{k}")
                } else {
                    String::new()
                };
                let p = h * w;
                let pred: Vec<&[f32]> = (0..f.times.len())
                    .map(|j| &f.frames.data()[j * p..(j + 1) * p])
                    .collect();
                for (j, frame) in pred.iter().enumerate() {
                    let name = format!("seq{i}_{tag}{j}{suffix}.pgm");
                    export::write(&dir.join(name), &export::encode_pgm(h, w, frame))?;
                    count += 1;
                }
                let top = f
                    .times
                    .iter()
                    .map(|&t| {
                        (t.fract() == 0.0 && (t as usize) < truth.len())
                            .then(|| truth.frame(t as usize))
                    })
                    .collect();
                let bottom = pred.iter().map(|&x| Some(x)).collect();
                let (sh, sw, px) = export::strip(h, w, &[top, bottom]);
                export::write(
                    &dir.join(format!("seq{i}_strip{suffix}.pgm")),
                    &export::encode_pgm(sh, sw, &px),
                )?;
            }
            Ok(count)
        })
        .collect::<Result<_>>()?;
    Ok(written.iter().sum())
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    make_dir(dir)?;
    export::write(&dir.join("report.txt"), report.to_lines().as_bytes())?;
    export::write(&dir.join("report.json"), report.to_json()?.as_bytes())
}

fn print_summary(report: &MetricReport) {
    let (r, h) = (&report.reconstruction, &report.held_out);
    println!(
        "reconstruction mse={:.6e} psnr={:.4} ssim={:.6} baseline_mse={:.6e}",
        r.mse, r.psnr, r.ssim, r.baseline_mse
    );
    if report.horizon > 0 {
        println!(
            "held_out mse={:.6e} psnr={:.4} ssim={:.6} baseline_mse={:.6e}",
            h.mse, h.psnr, h.ssim, h.baseline_mse
        );
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let mut horizon = 0;
    let mut sampling = None;
    let loaded = load_inference(&mut r, a.common, |r| {
        horizon = r.get("horizon", a.horizon, 10)?;
        sampling = Some(resolve_sampling(r, &a.sampling)?);
        Ok(())
    })?;
    r.finish("predict")?;
    let sampling = sampling.expect("resolved above");
    let dir = loaded
        .out_dir
        .clone()
        .ok_or_else(|| CliError::usage("missing required setting --out-dir"))?;
    let need = loaded.condition + horizon;
    if let Some(s) = loaded.data.iter().find(|s| s.len() < need) {
        return Err(CliError::new(
            "invalid",
            format!(
                "horizon {horizon} after {} conditioning frames exceeds the {} frames available",
                loaded.condition,
                s.len()
            ),
        ));
    }
    let all = forecasts(&loaded, &sampling, QueryMode::Extrapolate { horizon })?;
    let files = export(&dir, &loaded.data, &all, "t")?;
    let first: Vec<_> = all.iter().map(|f| f[0].frames.clone()).collect();
    let report = MetricReport::compute(&loaded.data, &first, loaded.condition)?;
    write_report(&dir, &report)?;
    println!(
        "frames={files} sequences={} dir={}",
        loaded.data.len(),
        dir.display()
    );
    print_summary(&report);
    Ok(())
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let mut factor = 0;
    let mut sampling = None;
    let loaded = load_inference(&mut r, a.common, |r| {
        factor = r.get("factor", a.factor, 2)?;
        sampling = Some(resolve_sampling(r, &a.sampling)?);
        Ok(())
    })?;
    r.finish("interpolate")?;
    let sampling = sampling.expect("resolved above");
    let dir = loaded
        .out_dir
        .clone()
        .ok_or_else(|| CliError::usage("missing required setting --out-dir"))?;
    let all = forecasts(&loaded, &sampling, QueryMode::Interpolate { factor })?;
    let files = export(&dir, &loaded.data, &all, "i")?;
    let times: String = all[0][0]
        .times
        .iter()
        .enumerate()
        .map(|(j, t)| format!("{j} {t}\n"))
        .collect();
    export::write(&dir.join("times.txt"), times.as_bytes())?;
    println!(
        "frames={files} sequences={} dir={}",
        loaded.data.len(),
        dir.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut r = Resolver::new(a.common.config.as_deref())?;
    let mut horizon = 0;
    let loaded = load_inference(&mut r, a.common, |r| {
        horizon = r.get("horizon", a.horizon, 10)?;
        Ok(())
    })?;
    r.finish("eval")?;
    let report = evaluate(&loaded.model, &loaded.data, loaded.condition, horizon)?;
    if let Some(dir) = &loaded.out_dir {
        write_report(dir, &report)?;
    }
    print!("{}", report.to_lines());
    print_summary(&report);
    Ok(())
}
