//! Rotary position tables: 1D for text, 2D (patch-time, channel) for sensors.
//!
//! Rotations act on interleaved pairs `(2p, 2p+1)` of each head. In the 2D
//! variant the first half of a head's pairs rotate with the patch-time index
//! and the second half with the channel index; each half uses the standard
//! frequency schedule `base^(−i/n)` over its `n` pairs.

use crate::autograd::{apply_rotation, RopeTables};
use crate::error::{Result, SlipError};
use crate::tensor::Matrix;

fn frequencies(pairs: usize, base: f64) -> Vec<f64> {
    (0..pairs).map(|i| base.powf(-(i as f64) / pairs as f64)).collect()
}

/// Tables for a token sequence at integer `positions`.
pub fn rope1d_tables(positions: &[usize], head_dim: usize, base: f64) -> Result<RopeTables> {
    if head_dim % 2 != 0 || head_dim == 0 {
        return Err(SlipError::Argument(format!("rotary head dim {head_dim} must be even")));
    }
    let pairs = head_dim / 2;
    let freq = frequencies(pairs, base);
    let mut cos = Matrix::zeros(positions.len(), pairs);
    let mut sin = Matrix::zeros(positions.len(), pairs);
    for (r, &pos) in positions.iter().enumerate() {
        for (p, f) in freq.iter().enumerate() {
            let angle = pos as f64 * f;
            cos.set(r, p, angle.cos());
            sin.set(r, p, angle.sin());
        }
    }
    Ok(RopeTables { cos, sin })
}

/// Tables for tokens at `(channel_index, patch_time_index)` coordinates.
/// Coordinates are signed so that shifted grids can be expressed directly.
pub fn rope2d_tables(coords: &[(i64, i64)], head_dim: usize, base: f64) -> Result<RopeTables> {
    if head_dim % 4 != 0 || head_dim == 0 {
        return Err(SlipError::Argument(format!(
            "2D rotary encoding needs a per-head dim divisible by 4, got {head_dim}"
        )));
    }
    let pairs = head_dim / 2;
    let half = pairs / 2;
    let freq = frequencies(half, base);
    let mut cos = Matrix::zeros(coords.len(), pairs);
    let mut sin = Matrix::zeros(coords.len(), pairs);
    for (r, &(channel, time)) in coords.iter().enumerate() {
        for (i, f) in freq.iter().enumerate() {
            let (at, ac) = (time as f64 * f, channel as f64 * f);
            cos.set(r, i, at.cos());
            sin.set(r, i, at.sin());
            cos.set(r, half + i, ac.cos());
            sin.set(r, half + i, ac.sin());
        }
    }
    Ok(RopeTables { cos, sin })
}

/// Rotates the rows of `x` (`tokens × heads·head_dim`) by their 2D coordinates.
pub fn rope2d_rotate(x: &Matrix, coords: &[(i64, i64)], heads: usize, base: f64) -> Result<Matrix> {
    if heads == 0 || x.cols() % heads != 0 {
        return Err(SlipError::Argument(format!(
            "{} columns do not split into {heads} heads",
            x.cols()
        )));
    }
    if coords.len() != x.rows() {
        return Err(SlipError::Argument(format!(
            "{} coords for {} rows",
            coords.len(),
            x.rows()
        )));
    }
    let tables = rope2d_tables(coords, x.cols() / heads, base)?;
    let mut out = x.clone();
    apply_rotation(&mut out, &tables, heads, false);
    Ok(out)
}
