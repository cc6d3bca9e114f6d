//! Bicubic (Catmull-Rom, a = -0.5) resampling for score-map upscaling and
//! optional fixed-size feature interpolation.
//!
//! Convention: destination pixel `j` samples source position
//! `j * in / out` (origin-aligned), taps edge-clamped. With an integer
//! scale factor every source sample is reproduced exactly at `j = s * i`.

use super::Tensor;
use crate::error::{Error, Result};

/// Catmull-Rom interpolation of the four taps `p0..p3` at fractional
/// position `t` in `[0, 1)` between `p1` and `p2`.
#[inline]
fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    p1 + 0.5
        * t
        * (p2 - p0
            + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + t * (3.0 * (p1 - p2) + p3 - p0)))
}

/// Resample one axis of length `n` to length `out` at destination index
/// `j`, reading through `get`.
#[inline]
fn sample_axis(n: usize, out: usize, j: usize, get: impl Fn(usize) -> f64) -> f64 {
    let pos = j as f64 * n as f64 / out as f64;
    let base = pos.floor();
    let t = pos - base;
    let base = base as isize;
    let clamp = |i: isize| -> usize { i.clamp(0, n as isize - 1) as usize };
    let p0 = get(clamp(base - 1));
    let p1 = get(clamp(base));
    let p2 = get(clamp(base + 1));
    let p3 = get(clamp(base + 2));
    catmull_rom(p0, p1, p2, p3, t)
}

/// Resize a 2D map `[h, w]` to `[out_h, out_w]`, separable bicubic.
pub fn bicubic_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w] = input.shape() else {
        return Err(Error::shape(format!(
            "bicubic expects a 2D map, got {:?}",
            input.shape()
        )));
    };
    if h == 0 || w == 0 {
        return Err(Error::shape("bicubic input has an empty axis"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "bicubic output dims must be positive, got {out_h}x{out_w}"
        )));
    }
    // Horizontal pass.
    let mut mid = Tensor::zeros(&[h, out_w]);
    for r in 0..h {
        for j in 0..out_w {
            let v = sample_axis(w, out_w, j, |i| input.at2(r, i));
            mid.set2(r, j, v);
        }
    }
    // Vertical pass.
    let mut out = Tensor::zeros(&[out_h, out_w]);
    for j in 0..out_w {
        for r in 0..out_h {
            let v = sample_axis(h, out_h, r, |i| mid.at2(i, j));
            out.set2(r, j, v);
        }
    }
    Ok(out)
}

/// Per-channel resize of a `[c, h, w]` image.
pub fn bicubic_resize_channels(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::shape(format!(
            "bicubic_resize_channels expects 3D, got {:?}",
            input.shape()
        )));
    };
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let plane =
            Tensor::from_shape_vec(&[h, w], input.data()[ch * h * w..(ch + 1) * h * w].to_vec())?;
        let resized = bicubic_resize(&plane, out_h, out_w)?;
        out.data_mut()[ch * out_h * out_w..(ch + 1) * out_h * out_w]
            .copy_from_slice(resized.data());
    }
    Ok(out)
}
