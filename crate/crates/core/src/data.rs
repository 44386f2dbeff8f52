//! Bouncing-sprite video sequences, MNIST IDX ingestion and the flat MMV1
//! dataset container.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ode::TimeGrid;
use crate::scalar::Real;

const IDX_IMAGES: u32 = 0x0000_0803;
const MMV1_MAGIC: &[u8; 4] = b"MMV1";
/// Magic plus the four little-endian counts.
pub const MMV1_HEADER_LEN: usize = 20;

/// Frames `[T, 1, H, W]` with values in `[0, 1]` observed at `times`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    frames: Tensor<f32>,
    times: TimeGrid<f64>,
}

impl VideoSequence {
    pub fn new(frames: Tensor<f32>, times: TimeGrid<f64>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 1 || s[0] != times.len() {
            return Err(Error::invalid(format!(
                "frames {s:?} do not match {} time points as [T, 1, H, W]",
                times.len()
            )));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(VideoSequence { frames, times })
    }

    /// Frames at unit spacing `0, 1, …, T − 1`.
    pub fn uniform(frames: Tensor<f32>) -> Result<Self> {
        let t = frames.shape().first().copied().unwrap_or(0);
        Self::new(frames, TimeGrid::uniform(t)?)
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn times(&self) -> &TimeGrid<f64> {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let p = self.height() * self.width();
        &self.frames.data()[t * p..(t + 1) * p]
    }
}

/// Row-major sprite intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitmap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Bitmap {
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }
}

/// Gaussian blob `exp(−r²/2σ²)` with `σ = size/4`, centred at `((size − 1)/2, (size − 1)/2)`.
pub fn synth_blob(size: usize) -> Result<Bitmap> {
    if size < 3 {
        return Err(Error::invalid(format!(
            "blob size must be at least 3, got {size}"
        )));
    }
    let sigma = size as f64 / 4.0;
    let c = (size as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        for k in 0..size {
            let d2 = (r as f64 - c).powi(2) + (k as f64 - c).powi(2);
            pixels.push((-d2 / (2.0 * sigma * sigma)).exp() as f32);
        }
    }
    Ok(Bitmap {
        height: size,
        width: size,
        pixels,
    })
}

/// Position (top-left corner, real pixels), velocity (pixels per frame) and
/// bitmap of one sprite.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub bitmap: Bitmap,
}

fn reflect(p: f64, v: f64, max: f64) -> (f64, f64) {
    let mut p = p + v;
    let mut v = v;
    // Speeds below the free span bounce at most once per frame; loop for safety.
    loop {
        if p > max {
            p = 2.0 * max - p;
            v = -v;
        } else if p < 0.0 {
            p = -p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

impl SpriteState {
    /// One frame of constant-velocity motion with elastic reflection off the
    /// canvas walls.
    pub fn advance(&mut self, canvas_h: usize, canvas_w: usize) {
        let max_x = (canvas_w - self.bitmap.width) as f64;
        let max_y = (canvas_h - self.bitmap.height) as f64;
        (self.x, self.vx) = if max_x > 0.0 {
            reflect(self.x, self.vx, max_x)
        } else {
            (0.0, 0.0)
        };
        (self.y, self.vy) = if max_y > 0.0 {
            reflect(self.y, self.vy, max_y)
        } else {
            (0.0, 0.0)
        };
    }

    /// Bilinear placement at the sub-pixel position, accumulated into `layer`.
    pub fn render(&self, layer: &mut [f32], canvas_h: usize, canvas_w: usize) {
        let (x0, y0) = (self.x.floor(), self.y.floor());
        let (fx, fy) = ((self.x - x0) as f32, (self.y - y0) as f32);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let weights = [
            (0, 0, (1.0 - fy) * (1.0 - fx)),
            (0, 1, (1.0 - fy) * fx),
            (1, 0, fy * (1.0 - fx)),
            (1, 1, fy * fx),
        ];
        let bm = &self.bitmap;
        for r in 0..bm.height {
            for c in 0..bm.width {
                let v = bm.at(r, c);
                if v == 0.0 {
                    continue;
                }
                for &(dr, dc, w) in &weights {
                    if w == 0.0 {
                        continue;
                    }
                    let (rr, cc) = (y0 + r + dr, x0 + c + dc);
                    if rr < canvas_h && cc < canvas_w {
                        layer[rr * canvas_w + cc] += w * v;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpriteSource {
    /// Gaussian blobs of the given size.
    Blob { size: usize },
    /// Digits from an MNIST IDX image file, resampled to `size × size`.
    Idx { path: PathBuf, size: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprites: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub seed: u64,
    pub source: SpriteSource,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            sequences: 200,
            frames: 20,
            height: 32,
            width: 32,
            sprites: 1,
            speed_min: 1.0,
            speed_max: 3.0,
            seed: 0,
            source: SpriteSource::Blob { size: 8 },
        }
    }
}

impl DatasetSpec {
    /// Canonical 64×64 Moving MNIST geometry with 28-pixel digits.
    pub fn canonical(path: PathBuf) -> Self {
        DatasetSpec {
            height: 64,
            width: 64,
            sprites: 2,
            speed_min: 2.0,
            speed_max: 5.0,
            source: SpriteSource::Idx { path, size: 28 },
            ..Self::default()
        }
    }

    pub fn sprite_size(&self) -> usize {
        match self.source {
            SpriteSource::Blob { size } | SpriteSource::Idx { size, .. } => size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("dataset counts must all be at least 1"));
        }
        if !(1..=2).contains(&self.sprites) {
            return Err(Error::invalid(format!(
                "sprites per sequence must be 1 or 2, got {}",
                self.sprites
            )));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min && self.speed_max.is_finite())
        {
            return Err(Error::invalid("speed range must be positive and ordered"));
        }
        let s = self.sprite_size();
        if s > self.height || s > self.width {
            return Err(Error::invalid(format!(
                "sprite of size {s} does not fit a {}x{} canvas",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Sprite positions and velocities at every frame, as simulated for one
/// generated sequence; `tracks[t][s]`.
pub type Tracks = Vec<Vec<[f64; 4]>>;

/// Generates the dataset; reproducible under `(seed, spec)`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<VideoSequence>> {
    Ok(generate_with_tracks(spec)?
        .into_iter()
        .map(|(v, _)| v)
        .collect())
}

/// As [`generate`], also returning each sequence's sprite `[x, y, vx, vy]` per frame.
pub fn generate_with_tracks(spec: &DatasetSpec) -> Result<Vec<(VideoSequence, Tracks)>> {
    spec.validate()?;
    let digits = match &spec.source {
        SpriteSource::Blob { .. } => None,
        SpriteSource::Idx { path, size } => {
            let images = load_idx(path)?;
            if images.shape()[0] == 0 {
                return Err(Error::Format(format!("{} holds no images", path.display())));
            }
            Some((images, *size))
        }
    };
    let blob = synth_blob(spec.sprite_size().max(3))?;
    (0..spec.sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let mut sprites: Vec<SpriteState> = (0..spec.sprites)
                .map(|_| {
                    let bitmap = match &digits {
                        None => blob.clone(),
                        Some((images, size)) => {
                            let k = rng.random_range(0..images.shape()[0]);
                            resample_digit(images, k, *size)
                        }
                    };
                    place(&mut rng, bitmap, spec)
                })
                .collect();
            render_sequence(&mut sprites, spec.frames, spec.height, spec.width)
        })
        .collect()
}

fn place(rng: &mut ChaCha8Rng, bitmap: Bitmap, spec: &DatasetSpec) -> SpriteState {
    let max_x = (spec.width - bitmap.width) as f64;
    let max_y = (spec.height - bitmap.height) as f64;
    let x = if max_x > 0.0 {
        rng.random_range(0.0..max_x)
    } else {
        0.0
    };
    let y = if max_y > 0.0 {
        rng.random_range(0.0..max_y)
    } else {
        0.0
    };
    let speed = if spec.speed_max > spec.speed_min {
        rng.random_range(spec.speed_min..spec.speed_max)
    } else {
        spec.speed_min
    };
    let angle = rng.random_range(0.0..2.0 * PI);
    SpriteState {
        x,
        y,
        vx: speed * angle.cos(),
        vy: speed * angle.sin(),
        bitmap,
    }
}

/// Renders `frames` frames, advancing every sprite between frames.
pub fn render_sequence(
    sprites: &mut [SpriteState],
    frames: usize,
    height: usize,
    width: usize,
) -> Result<(VideoSequence, Tracks)> {
    let p = height * width;
    let mut data = vec![0.0f32; frames * p];
    let mut tracks = Vec::with_capacity(frames);
    let mut layer = vec![0.0f32; p];
    for t in 0..frames {
        if t > 0 {
            sprites.iter_mut().for_each(|s| s.advance(height, width));
        }
        let frame = &mut data[t * p..(t + 1) * p];
        for s in sprites.iter() {
            layer.iter_mut().for_each(|v| *v = 0.0);
            s.render(&mut layer, height, width);
            for (f, &l) in frame.iter_mut().zip(&layer) {
                *f = f.max(l.clamp(0.0, 1.0));
            }
        }
        tracks.push(sprites.iter().map(|s| [s.x, s.y, s.vx, s.vy]).collect());
    }
    let frames = Tensor::new(&[frames, 1, height, width], data)?;
    Ok((VideoSequence::uniform(frames)?, tracks))
}

fn resample_digit(images: &Tensor<f32>, k: usize, size: usize) -> Bitmap {
    let (h, w) = (images.shape()[1], images.shape()[2]);
    let src = &images.data()[k * h * w..(k + 1) * h * w];
    let sample = |r: f64, c: f64| -> f32 {
        let r = r.clamp(0.0, (h - 1) as f64);
        let c = c.clamp(0.0, (w - 1) as f64);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fr, fc) = ((r - r0 as f64) as f32, (c - c0 as f64) as f32);
        let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
        let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
        top * (1.0 - fr) + bot * fr
    };
    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let sr = (r as f64 + 0.5) * h as f64 / size as f64 - 0.5;
            let sc = (c as f64 + 0.5) * w as f64 / size as f64 - 0.5;
            pixels.push(sample(sr, sc).clamp(0.0, 1.0));
        }
    }
    Bitmap {
        height: size,
        width: size,
        pixels,
    }
}

/// Parses a big-endian IDX image file into `[N, H, W]` scaled to `[0, 1]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor<f32>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("IDX header truncated".into()))
    };
    let magic = word(0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "IDX magic {magic:#010x} is not an unsigned-byte image tensor (expected {IDX_IMAGES:#010x})"
        )));
    }
    let (n, h, w) = (word(1)? as usize, word(2)? as usize, word(3)? as usize);
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "IDX payload truncated: {} of {need} pixel bytes present",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(&[n, h, w], data)
}

pub fn load_idx(path: &Path) -> Result<Tensor<f32>> {
    parse_idx(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Disjoint seeded split; `round(n · fraction)` sequences go to training.
pub fn split<V: Clone>(dataset: &[V], train_fraction: f64, seed: u64) -> Result<(Vec<V>, Vec<V>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (dataset.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == dataset.len() {
        return Err(Error::invalid(format!(
            "splitting {} sequences at {train_fraction} leaves one side empty",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect();
    Ok((take(&order[..n_train]), take(&order[n_train..])))
}

/// MMV1 bytes: `"MMV1"`, u32 N, T, H, W (little-endian), then f32 pixels
/// sequence-major.
pub fn encode_mmv1(dataset: &[VideoSequence]) -> Result<Vec<u8>> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::invalid("cannot export an empty dataset"))?;
    let dims = [first.len(), first.height(), first.width()];
    let mut out = Vec::with_capacity(MMV1_HEADER_LEN + dataset.len() * first.frames().len() * 4);
    out.extend_from_slice(MMV1_MAGIC);
    for d in [dataset.len()].iter().chain(&dims) {
        let d = u32::try_from(*d).map_err(|_| Error::invalid("dataset dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for seq in dataset {
        if [seq.len(), seq.height(), seq.width()] != dims {
            return Err(Error::invalid("all sequences must share T, H and W"));
        }
        for v in seq.frames().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_mmv1(bytes: &[u8]) -> Result<Vec<VideoSequence>> {
    if bytes.len() < MMV1_HEADER_LEN || &bytes[..4] != MMV1_MAGIC {
        return Err(Error::Format("not an MMV1 dataset".into()));
    }
    let word = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (n, t, h, w) = (word(0), word(1), word(2), word(3));
    let per = t * h * w;
    let payload = &bytes[MMV1_HEADER_LEN..];
    if payload.len() != n * per * 4 {
        return Err(Error::Format(format!(
            "MMV1 payload holds {} bytes, header declares {}",
            payload.len(),
            n * per * 4
        )));
    }
    payload
        .chunks_exact(per * 4)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            VideoSequence::uniform(Tensor::new(&[t, 1, h, w], data)?)
        })
        .collect()
}

pub fn write_mmv1(path: &Path, dataset: &[VideoSequence]) -> Result<()> {
    fs::write(path, encode_mmv1(dataset)?).map_err(|e| Error::io(path, e))
}

pub fn read_mmv1(path: &Path) -> Result<Vec<VideoSequence>> {
    decode_mmv1(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Read access to a set of equally shaped sequences, one frame at a time.
pub trait FrameSource: Sync {
    fn sequences(&self) -> usize;
    fn frames_per_sequence(&self) -> usize;
    /// `(H, W)`.
    fn frame_size(&self) -> (usize, usize);
    fn frame(&self, seq: usize, t: usize) -> &[f32];
}

impl FrameSource for [VideoSequence] {
    fn sequences(&self) -> usize {
        self.len()
    }

    fn frames_per_sequence(&self) -> usize {
        self.first().map_or(0, VideoSequence::len)
    }

    fn frame_size(&self) -> (usize, usize) {
        self.first().map_or((0, 0), |s| (s.height(), s.width()))
    }

    fn frame(&self, seq: usize, t: usize) -> &[f32] {
        self[seq].frame(t)
    }
}

impl FrameSource for Vec<VideoSequence> {
    fn sequences(&self) -> usize {
        self.as_slice().sequences()
    }

    fn frames_per_sequence(&self) -> usize {
        self.as_slice().frames_per_sequence()
    }

    fn frame_size(&self) -> (usize, usize) {
        self.as_slice().frame_size()
    }

    fn frame(&self, seq: usize, t: usize) -> &[f32] {
        self.as_slice().frame(seq, t)
    }
}

/// Frames `0..count` of the listed sequences as a time-major
/// `[count, seqs.len(), 1, H, W]` tensor.
pub fn gather_frames<T: Real, S: FrameSource + ?Sized>(
    src: &S,
    seqs: &[usize],
    count: usize,
) -> Result<Tensor<T>> {
    if count > src.frames_per_sequence() {
        return Err(Error::invalid(format!(
            "requested {count} frames from sequences of {}",
            src.frames_per_sequence()
        )));
    }
    let (h, w) = src.frame_size();
    let mut data = Vec::with_capacity(count * seqs.len() * h * w);
    for t in 0..count {
        for &s in seqs {
            data.extend(src.frame(s, t).iter().map(|&v| T::of(v as f64)));
        }
    }
    Tensor::new(&[count, seqs.len(), 1, h, w], data)
}

/// Wraps a source and records the highest frame index ever read.
pub struct Audited<'a, S: ?Sized> {
    inner: &'a S,
    /// One more than the largest index read; 0 before any read.
    reach: AtomicUsize,
    reads: AtomicUsize,
}

impl<'a, S: FrameSource + ?Sized> Audited<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Audited {
            inner,
            reach: AtomicUsize::new(0),
            reads: AtomicUsize::new(0),
        }
    }

    /// Number of leading frame indices touched so far.
    pub fn reach(&self) -> usize {
        self.reach.load(Ordering::SeqCst)
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

impl<S: FrameSource + ?Sized> FrameSource for Audited<'_, S> {
    fn sequences(&self) -> usize {
        self.inner.sequences()
    }

    fn frames_per_sequence(&self) -> usize {
        self.inner.frames_per_sequence()
    }

    fn frame_size(&self) -> (usize, usize) {
        self.inner.frame_size()
    }

    fn frame(&self, seq: usize, t: usize) -> &[f32] {
        self.reach.fetch_max(t + 1, Ordering::SeqCst);
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.inner.frame(seq, t)
    }
}
