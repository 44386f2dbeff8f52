//! Binary PGM frames and contact strips.

use std::fs;
use std::path::Path;

use crate::CliError;

/// `round(v · 255)` with halves rounded up, after clamping to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (f64::from(v.clamp(0.0, 1.0)) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[f32]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| quantize(v)));
    out
}

/// Tiles `rows × cols` frames of `h × w`; empty tiles stay black.
pub fn strip(h: usize, w: usize, tiles: &[Vec<Option<&[f32]>>]) -> (usize, usize, Vec<f32>) {
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    let (height, width) = (tiles.len() * h, cols * w);
    let mut px = vec![0.0f32; height * width];
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let Some(frame) = tile else { continue };
            for y in 0..h {
                let dst = (r * h + y) * width + c * w;
                px[dst..dst + w].copy_from_slice(&frame[y * w..(y + 1) * w]);
            }
        }
    }
    (height, width, px)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}
