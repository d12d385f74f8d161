//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use aeprep::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values whose magnitude stays at least `gap` away from zero, so
/// relu/max kinks sit outside a finite-difference stencil.
pub fn uniform_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f32, gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Leading padding for "same" mode: total = max((ceil(n/s)-1)·s + k − n, 0), floor half first.
pub fn same_pad(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = (n + s - 1) / s;
    let total = ((out - 1) * s + k).saturating_sub(n);
    (total / 2, out)
}

/// Six-nested-loop cross-correlation over `x[h,w,c]`, `wt[kh,kw,c,f]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(x: &[f32], h: usize, w: usize, c: usize, wt: &[f32], kh: usize, kw: usize, f: usize, bias: Option<&[f32]>, stride: usize, same: bool) -> (Vec<f32>, usize, usize) {
    let ((pt, oh), (pl, ow)) = if same {
        (same_pad(h, kh, stride), same_pad(w, kw, stride))
    } else {
        ((0, (h - kh) / stride + 1), (0, (w - kw) / stride + 1))
    };
    let mut out = vec![0.0f32; oh * ow * f];
    for oy in 0..oh {
        for ox in 0..ow {
            for fo in 0..f {
                let mut acc = bias.map_or(0.0f64, |b| b[fo] as f64);
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..c {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[((iy as usize) * w + ix as usize) * c + ci] as f64;
                            acc += xv * wt[((ky * kw + kx) * c + ci) * f + fo] as f64;
                        }
                    }
                }
                out[(oy * ow + ox) * f + fo] = acc as f32;
            }
        }
    }
    (out, oh, ow)
}

/// Per-channel loop: `Y[i,j,c] = Σ_{m,n} W[m,n,c] · X[i·s+m−pad, j·s+n−pad, c]`.
pub fn naive_depthwise(x: &[f32], h: usize, w: usize, c: usize, wt: &[f32], k: usize, stride: usize, same: bool) -> (Vec<f32>, usize, usize) {
    let ((pt, oh), (pl, ow)) = if same {
        (same_pad(h, k, stride), same_pad(w, k, stride))
    } else {
        ((0, (h - k) / stride + 1), (0, (w - k) / stride + 1))
    };
    let mut out = vec![0.0f32; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for m in 0..k {
                    for n in 0..k {
                        let iy = (i * stride + m) as isize - pt as isize;
                        let ix = (j * stride + n) as isize - pl as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[(m * k + n) * c + ch] as f64 * x[((iy as usize) * w + ix as usize) * c + ch] as f64;
                        }
                    }
                }
                out[(i * ow + j) * c + ch] = acc as f32;
            }
        }
    }
    (out, oh, ow)
}

/// `Y[p, k] = Σ_c W[c, k] · X[p, c]` for every pixel `p`.
pub fn naive_pointwise(x: &[f32], pixels: usize, c: usize, wt: &[f32], f: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; pixels * f];
    for p in 0..pixels {
        for k in 0..f {
            out[p * f + k] = (0..c).map(|ci| wt[ci * f + k] as f64 * x[p * c + ci] as f64).sum::<f64>() as f32;
        }
    }
    out
}

/// Adaptive average pooling by explicit bin enumeration.
pub fn naive_adaptive_pool(x: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let bin = |i: usize, n: usize, o: usize| {
        let lo = (i as f64 * n as f64 / o as f64).floor() as usize;
        let hi = ((i + 1) as f64 * n as f64 / o as f64).ceil() as usize;
        (lo, hi)
    };
    let mut out = Vec::new();
    for i in 0..oh {
        for j in 0..ow {
            let (y0, y1) = bin(i, h, oh);
            let (x0, x1) = bin(j, w, ow);
            for ch in 0..c {
                let mut s = 0.0f64;
                let mut n = 0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x[(y * w + xx) * c + ch] as f64;
                        n += 1;
                    }
                }
                out.push((s / n as f64) as f32);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub mod cases;
pub mod tables;
