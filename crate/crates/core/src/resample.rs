//! Separable bicubic resampling (Catmull-Rom, `a = -0.5`) with half-pixel
//! centre alignment and edge clamping.
//!
//! Resampling is expressed as a pair of dense interpolation matrices so the
//! same weights serve plain arrays and the differentiable tape op.

use std::sync::Arc;

use crate::tensor::Tensor;

pub const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// `(out_len, in_len)` matrix mapping a length-`in_len` signal to `out_len` samples.
pub fn bicubic_matrix(out_len: usize, in_len: usize) -> Tensor {
    assert!(out_len >= 1 && in_len >= 1);
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = (i as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        let base = base as isize;
        let taps = [
            (base - 1, cubic(t + 1.0)),
            (base, cubic(t)),
            (base + 1, cubic(1.0 - t)),
            (base + 2, cubic(2.0 - t)),
        ];
        for (idx, w) in taps {
            let j = idx.clamp(0, in_len as isize - 1) as usize;
            m[i * in_len + j] += w;
        }
        // Nudge the largest tap until the row sums to exactly 1 in index
        // order, so constant inputs come back unchanged.
        let row = &mut m[i * in_len..(i + 1) * in_len];
        let big = (0..in_len).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        for _ in 0..8 {
            let s = row.iter().fold(0.0, |acc, v| acc + v);
            if s == 1.0 {
                break;
            }
            row[big] += 1.0 - s;
        }
    }
    Tensor::from_parts(vec![out_len, in_len], m)
}

/// Interpolation matrices `(ry, rx)` for a `(h, w) -> (out_h, out_w)` resample.
pub fn bicubic_pair(h: usize, w: usize, out_h: usize, out_w: usize) -> (Arc<Tensor>, Arc<Tensor>) {
    (
        Arc::new(bicubic_matrix(out_h, h)),
        Arc::new(bicubic_matrix(out_w, w)),
    )
}

/// Resamples every channel of a `(C, H, W)` tensor. No clamping.
pub fn resample_chw(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let (ry, rx) = bicubic_pair(h, w, out_h, out_w);
    let out = crate::autodiff::resample_forward(x.data(), s, &ry, &rx);
    Tensor::from_parts(vec![c, out_h, out_w], out)
}
