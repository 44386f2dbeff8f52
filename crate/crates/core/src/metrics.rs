//! Full-reference frame quality: MSE, PSNR and single-scale SSIM, aggregated
//! per time step against a copy-last-conditioning-frame baseline.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Reported PSNR when the frames are (numerically) identical.
pub const PSNR_CAP: f64 = 120.0;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            op: "frame metric",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

pub fn mse<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    same_len(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log₁₀(peak²/mse)`, capped at [`PSNR_CAP`] once `mse < 1e-12`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr<T: Real>(a: &[T], b: &[T], peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

fn gaussian_window() -> [f64; WINDOW * WINDOW] {
    let c = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW * WINDOW];
    for r in 0..WINDOW {
        for k in 0..WINDOW {
            let d2 = (r as f64 - c).powi(2) + (k as f64 - c).powi(2);
            w[r * WINDOW + k] = (-d2 / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean SSIM over every fully contained 11×11 Gaussian window (σ = 1.5).
pub fn ssim<T: Real>(a: &[T], b: &[T], height: usize, width: usize, peak: f64) -> Result<f64> {
    same_len(a, b)?;
    if a.len() != height * width {
        return Err(Error::Shape {
            op: "ssim",
            lhs: vec![height, width],
            rhs: vec![a.len()],
        });
    }
    if height < WINDOW || width < WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs frames of at least {WINDOW}x{WINDOW}, got {height}x{width}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let w = gaussian_window();
    let (a, b): (Vec<f64>, Vec<f64>) = (
        a.iter().map(|v| v.as_f64()).collect(),
        b.iter().map(|v| v.as_f64()).collect(),
    );
    let mut total = 0.0;
    let (rows, cols) = (height - WINDOW + 1, width - WINDOW + 1);
    for r0 in 0..rows {
        for c0 in 0..cols {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in 0..WINDOW {
                let base = (r0 + r) * width + c0;
                for k in 0..WINDOW {
                    let g = w[r * WINDOW + k];
                    let (x, y) = (a[base + k], b[base + k]);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (rows * cols) as f64)
}

/// Mean and population standard deviation over sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Stat::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub time: f64,
    /// `false` inside the conditioning (reconstruction) window.
    pub held_out: bool,
    pub mse: Stat,
    pub psnr: Stat,
    pub ssim: Stat,
    pub baseline_mse: Stat,
    pub baseline_psnr: Stat,
    pub baseline_ssim: Stat,
}

/// Means over every (sequence, step) pair of one window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: usize,
    pub condition: usize,
    pub horizon: usize,
    pub steps: Vec<StepMetrics>,
    pub reconstruction: WindowSummary,
    pub held_out: WindowSummary,
}

impl MetricReport {
    /// Scores `predicted[i]` (`[condition + horizon, 1, H, W]`) against
    /// `truth[i]`; the baseline repeats frame `condition − 1` of the truth.
    pub fn compute(
        truth: &[VideoSequence],
        predicted: &[Tensor<f32>],
        condition: usize,
    ) -> Result<Self> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(Error::invalid(format!(
                "{} predictions for {} ground-truth sequences",
                predicted.len(),
                truth.len()
            )));
        }
        let steps = predicted[0].shape()[0];
        if condition == 0 || steps < condition {
            return Err(Error::invalid(
                "prediction must cover the conditioning window",
            ));
        }
        let (h, w) = (truth[0].height(), truth[0].width());
        let p = h * w;
        for (t, y) in truth.iter().zip(predicted) {
            if y.shape() != [steps, 1, h, w] || t.height() != h || t.width() != w {
                return Err(Error::Shape {
                    op: "metric report",
                    lhs: vec![steps, 1, h, w],
                    rhs: y.shape().to_vec(),
                });
            }
            if t.len() < steps {
                return Err(Error::invalid(format!(
                    "horizon {} exceeds the {} ground-truth frames available",
                    steps - condition,
                    t.len()
                )));
            }
        }
        let mut rows = Vec::with_capacity(steps);
        let mut windows = [[0.0f64; 4]; 2];
        for j in 0..steps {
            let mut cols: [Vec<f64>; 6] = Default::default();
            for (t, y) in truth.iter().zip(predicted) {
                let real = t.frame(j);
                let pred = &y.data()[j * p..(j + 1) * p];
                let base = t.frame(condition - 1);
                let (m, bm) = (mse(real, pred)?, mse(real, base)?);
                cols[0].push(m);
                cols[1].push(psnr_from_mse(m, 1.0));
                cols[2].push(ssim(real, pred, h, w, 1.0)?);
                cols[3].push(bm);
                cols[4].push(psnr_from_mse(bm, 1.0));
                cols[5].push(ssim(real, base, h, w, 1.0)?);
            }
            let held_out = j >= condition;
            let acc = &mut windows[held_out as usize];
            for (slot, col) in acc.iter_mut().zip([&cols[0], &cols[1], &cols[2], &cols[3]]) {
                *slot += col.iter().sum::<f64>();
            }
            rows.push(StepMetrics {
                step: j,
                time: truth[0].times().times()[j],
                held_out,
                mse: Stat::of(&cols[0]),
                psnr: Stat::of(&cols[1]),
                ssim: Stat::of(&cols[2]),
                baseline_mse: Stat::of(&cols[3]),
                baseline_psnr: Stat::of(&cols[4]),
                baseline_ssim: Stat::of(&cols[5]),
            });
        }
        let summary = |acc: [f64; 4], n: usize| {
            let n = (n * truth.len()).max(1) as f64;
            WindowSummary {
                mse: acc[0] / n,
                psnr: acc[1] / n,
                ssim: acc[2] / n,
                baseline_mse: acc[3] / n,
            }
        };
        Ok(MetricReport {
            sequences: truth.len(),
            condition,
            horizon: steps - condition,
            steps: rows,
            reconstruction: summary(windows[0], condition),
            held_out: summary(windows[1], steps - condition),
        })
    }

    /// One `step=… mse=… psnr=… ssim=… baseline_mse=…` line per step.
    pub fn to_lines(&self) -> String {
        self.steps
            .iter()
            .map(|s| {
                format!(
                    "step={} mse={:.6e} psnr={:.4} ssim={:.6} baseline_mse={:.6e}\n",
                    s.step, s.mse.mean, s.psnr.mean, s.ssim.mean, s.baseline_mse.mean
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
