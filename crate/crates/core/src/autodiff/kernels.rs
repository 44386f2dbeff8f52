//! Raw numeric kernels over row-major slices.

use crate::scalar::Real;

/// Columns per tile in [`matmul_acc`], so a tile of `c` and `b` rows stays in L1.
const COL_TILE: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`.
///
/// Each entry accumulates over `k` in order, whatever the tiling, so a column
/// of `c` does not depend on the other columns of `b`.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for j0 in (0..n).step_by(COL_TILE) {
        let j1 = (j0 + COL_TILE).min(n);
        for i in 0..m {
            let c_row = &mut c[i * n + j0..i * n + j1];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == T::zero() {
                    continue;
                }
                let b_row = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ip * bv;
                }
            }
        }
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Result shape of trailing-dimension broadcasting, or `None` if incompatible.
/// `[batch, c, n]` to `[c, batch·n]`.
pub fn channel_major<T: Real>(a: &[T], batch: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &a[(b * c + ch) * n..(b * c + ch + 1) * n];
            out[ch * batch * n + b * n..ch * batch * n + (b + 1) * n].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`channel_major`].
pub fn batch_major<T: Real>(a: &[T], batch: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &a[ch * batch * n + b * n..ch * batch * n + (b + 1) * n];
            out[(b * c + ch) * n..(b * c + ch + 1) * n].copy_from_slice(src);
        }
    }
    out
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand of shape `input` is read when broadcast to `output`.
#[derive(Clone, Debug)]
pub enum Broadcast {
    Same,
    Scalar,
    /// The operand repeats with period `n` along the flat output.
    Cyclic(usize),
    Offsets(Vec<usize>),
}

impl Broadcast {
    pub fn plan(input: &[usize], output: &[usize]) -> Broadcast {
        let n_in: usize = input.iter().product();
        let n_out: usize = output.iter().product();
        if n_in == n_out {
            return Broadcast::Same;
        }
        if n_in == 1 {
            return Broadcast::Scalar;
        }
        let stripped: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if output.ends_with(&stripped) {
            return Broadcast::Cyclic(n_in);
        }
        // General case: stride 0 along broadcast axes.
        let rank = output.len();
        let pad = rank - input.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..rank).rev() {
            let d = if i < pad { 1 } else { input[i - pad] };
            strides[i] = if d == 1 { 0 } else { s };
            s *= d;
        }
        let mut offsets = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n_out {
            offsets.push(off);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < output[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Broadcast::Offsets(offsets)
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Cyclic(n) => i % n,
            Broadcast::Offsets(o) => o[i],
        }
    }

    /// Sums an output-shaped gradient back onto the operand's elements.
    pub fn reduce<T: Real>(&self, grad: &[T], n_in: usize) -> Vec<T> {
        match self {
            Broadcast::Same => grad.to_vec(),
            _ => {
                let mut out = vec![T::zero(); n_in];
                for (i, &g) in grad.iter().enumerate() {
                    out[self.index(i)] += g;
                }
                out
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation over a `channels × height × width` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `None` when the output extent is not integral or not positive.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<ConvGeom> {
        let extent = |n: usize| {
            let span = (n + 2 * pad).checked_sub(kernel)?;
            (span % stride == 0).then_some(span / stride + 1)
        };
        if stride == 0 || kernel == 0 {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: extent(height)?,
            out_w: extent(width)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    fn source(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad)
            .filter(|&y| y < self.height)
    }

    #[inline]
    fn source_x(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.pad)
            .filter(|&x| x < self.width)
    }

    /// Unfolds image patches into a `(c·k·k) × (out_h·out_w)` matrix.
    pub fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let n = self.col_cols();
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ky) {
                            None => line.fill(T::zero()),
                            Some(y) => {
                                let src = &img[(c * self.height + y) * self.width..];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source_x(ox, kx) {
                                        Some(x) => src[x],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Patches of `batch` images side by side: `(c·k·k) × (batch·out_h·out_w)`.
    pub fn im2col_batch<T: Real>(&self, imgs: &[T], batch: usize) -> Vec<T> {
        let (rows, n, img) = (self.col_rows(), self.col_cols(), self.image_len());
        let mut one = vec![T::zero(); rows * n];
        let mut cols = vec![T::zero(); rows * batch * n];
        for b in 0..batch {
            self.im2col(&imgs[b * img..(b + 1) * img], &mut one);
            for r in 0..rows {
                cols[r * batch * n + b * n..r * batch * n + (b + 1) * n]
                    .copy_from_slice(&one[r * n..(r + 1) * n]);
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col_batch`].
    pub fn col2im_batch<T: Real>(&self, cols: &[T], batch: usize, imgs: &mut [T]) {
        let (rows, n, img) = (self.col_rows(), self.col_cols(), self.image_len());
        let mut one = vec![T::zero(); rows * n];
        for b in 0..batch {
            for r in 0..rows {
                one[r * n..(r + 1) * n]
                    .copy_from_slice(&cols[r * batch * n + b * n..r * batch * n + (b + 1) * n]);
            }
            self.col2im(&one, &mut imgs[b * img..(b + 1) * img]);
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back, accumulating overlaps.
    pub fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let k = self.kernel;
        let n = self.col_cols();
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, ky) else {
                            continue;
                        };
                        let dst = &mut img[(c * self.height + y) * self.width..];
                        for ox in 0..self.out_w {
                            if let Some(x) = self.source_x(ox, kx) {
                                dst[x] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
