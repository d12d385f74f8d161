//! Raw forward/backward kernels over channels-last slices.
//!
//! Convolution kernels copy the input into an explicitly zero-padded buffer
//! so that every tap of every output pixel is a real multiply-accumulate.
//! The thread-local MAC counter therefore measures exactly what ran.

use std::cell::Cell;

use crate::tensor::{dim_err, TensorError};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates executed by forward convolution kernels on this thread.
pub fn mac_count() -> u64 {
    MACS.with(|m| m.get())
}

pub fn reset_mac_count() {
    MACS.with(|m| m.set(0));
}

fn add_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`; odd totals put the
    /// extra row/column on the trailing edge.
    Same,
}

/// Resolved geometry of one 2-D sliding-window op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub oh: usize,
    pub ow: usize,
}

fn axis_geom(op: &'static str, axis: &str, n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize, usize), TensorError> {
    match padding {
        Padding::Valid => {
            if k > n {
                return Err(dim_err(op, format!("{axis} (kernel exceeds input)"), k, n));
            }
            Ok((0, 0, (n - k) / stride + 1))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            let before = total / 2;
            Ok((before, total - before, out))
        }
    }
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: &'static str,
        h: usize,
        w: usize,
        c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self, TensorError> {
        if stride == 0 {
            return Err(TensorError::InvalidInput { op, detail: "stride must be positive".into() });
        }
        if kh == 0 || kw == 0 {
            return Err(TensorError::InvalidInput { op, detail: "kernel must be non-empty".into() });
        }
        let (pad_top, pad_bottom, oh) = axis_geom(op, "height", h, kh, stride, padding)?;
        let (pad_left, pad_right, ow) = axis_geom(op, "width", w, kw, stride, padding)?;
        Ok(Self { h, w, c, kh, kw, stride, pad_top, pad_left, pad_bottom, pad_right, oh, ow })
    }

    pub fn hp(&self) -> usize {
        self.h + self.pad_top + self.pad_bottom
    }

    pub fn wp(&self) -> usize {
        self.w + self.pad_left + self.pad_right
    }

    fn is_unpadded(&self) -> bool {
        self.pad_top + self.pad_bottom + self.pad_left + self.pad_right == 0
    }
}

/// Copies `x` into a zero-padded `[hp, wp, c]` buffer.
pub fn pad_input(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    if g.is_unpadded() {
        return x.to_vec();
    }
    let (wp, c) = (g.wp(), g.c);
    let mut out = vec![0.0; g.hp() * wp * c];
    for y in 0..g.h {
        let src = &x[y * g.w * c..(y + 1) * g.w * c];
        let start = ((y + g.pad_top) * wp + g.pad_left) * c;
        out[start..start + g.w * c].copy_from_slice(src);
    }
    out
}

/// Inverse of [`pad_input`] for gradients: drops the padded border.
pub fn crop_padded(xp: &[f32], g: &ConvGeom) -> Vec<f32> {
    if g.is_unpadded() {
        return xp.to_vec();
    }
    let (wp, c) = (g.wp(), g.c);
    let mut out = vec![0.0; g.h * g.w * c];
    for y in 0..g.h {
        let start = ((y + g.pad_top) * wp + g.pad_left) * c;
        out[y * g.w * c..(y + 1) * g.w * c].copy_from_slice(&xp[start..start + g.w * c]);
    }
    out
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f32]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v as f64;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn narrow(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Full convolution (cross-correlation). `w` is `[kh, kw, c, f]`.
pub fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom, f: usize) -> Vec<f32> {
    let xp = pad_input(x, g);
    let (wp, c, s) = (g.wp(), g.c, g.stride);
    let mut out = vec![0.0f64; g.oh * g.ow * f];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * f..][..f];
            if let Some(b) = bias {
                o.copy_from_slice(&widen(b));
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let xoff = ((oy * s + ky) * wp + ox * s + kx) * c;
                    let woff = (ky * g.kw + kx) * c * f;
                    for ci in 0..c {
                        axpy(o, xp[xoff + ci] as f64, &w[woff + ci * f..][..f]);
                    }
                }
            }
        }
    }
    add_macs((g.oh * g.ow * g.kh * g.kw * c * f) as u64);
    narrow(out)
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &ConvGeom,
    f: usize,
    dout: &[f32],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let xp = pad_input(x, g);
    let (wp, c, s) = (g.wp(), g.c, g.stride);
    let mut dxp = need_dx.then(|| vec![0.0f64; xp.len()]);
    let mut dw = need_dw.then(|| vec![0.0f64; w.len()]);
    let mut db = need_db.then(|| vec![0.0f64; f]);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &dout[(oy * g.ow + ox) * f..][..f];
            if let Some(db) = db.as_mut() {
                for (acc, &v) in db.iter_mut().zip(d) {
                    *acc += v as f64;
                }
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let xoff = ((oy * s + ky) * wp + ox * s + kx) * c;
                    let woff = (ky * g.kw + kx) * c * f;
                    for ci in 0..c {
                        let wrow = &w[woff + ci * f..][..f];
                        if let Some(dw) = dw.as_mut() {
                            axpy(&mut dw[woff + ci * f..][..f], xp[xoff + ci] as f64, d);
                        }
                        if let Some(dxp) = dxp.as_mut() {
                            dxp[xoff + ci] += dot(wrow, d);
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx: dxp.map(|d| crop_padded(&narrow(d), g)), dw: dw.map(narrow), db: db.map(narrow) }
}

/// Per-channel convolution. `w` is `[kh, kw, c]`.
pub fn depthwise_forward(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let xp = pad_input(x, g);
    let (wp, c, s) = (g.wp(), g.c, g.stride);
    let mut out = vec![0.0f64; g.oh * g.ow * c];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * c..][..c];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let xs = &xp[((oy * s + ky) * wp + ox * s + kx) * c..][..c];
                    let ws = &w[(ky * g.kw + kx) * c..][..c];
                    for ((o, &xv), &wv) in o.iter_mut().zip(xs).zip(ws) {
                        *o += xv as f64 * wv as f64;
                    }
                }
            }
        }
    }
    add_macs((g.oh * g.ow * g.kh * g.kw * c) as u64);
    narrow(out)
}

pub fn depthwise_backward(x: &[f32], w: &[f32], g: &ConvGeom, dout: &[f32], need_dx: bool, need_dw: bool) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let xp = pad_input(x, g);
    let (wp, c, s) = (g.wp(), g.c, g.stride);
    let mut dxp = need_dx.then(|| vec![0.0f64; xp.len()]);
    let mut dw = need_dw.then(|| vec![0.0f64; w.len()]);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &dout[(oy * g.ow + ox) * c..][..c];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let xoff = ((oy * s + ky) * wp + ox * s + kx) * c;
                    let woff = (ky * g.kw + kx) * c;
                    if let Some(dw) = dw.as_mut() {
                        for ((acc, &xv), &dv) in dw[woff..woff + c].iter_mut().zip(&xp[xoff..xoff + c]).zip(d) {
                            *acc += xv as f64 * dv as f64;
                        }
                    }
                    if let Some(dxp) = dxp.as_mut() {
                        for ((acc, &wv), &dv) in dxp[xoff..xoff + c].iter_mut().zip(&w[woff..woff + c]).zip(d) {
                            *acc += wv as f64 * dv as f64;
                        }
                    }
                }
            }
        }
    }
    (dxp.map(|d| crop_padded(&narrow(d), g)), dw.map(narrow))
}

/// `out[m, n] (+)= a[m, k] · b[k, n]`, row-major.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0f64; m * n];
    for (i, o) in out.chunks_exact_mut(n).enumerate() {
        if let Some(bias) = bias {
            o.copy_from_slice(&widen(bias));
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            axpy(o, av as f64, &b[p * n..(p + 1) * n]);
        }
    }
    narrow(out)
}

/// Gradients of `out = a·b (+ bias)` given `dout[m, n]`.
pub fn matmul_backward(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    dout: &[f32],
    need_da: bool,
    need_db: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let da = need_da.then(|| {
        let mut da = vec![0.0; m * k];
        for i in 0..m {
            let d = &dout[i * n..(i + 1) * n];
            for p in 0..k {
                da[i * k + p] = dot(&b[p * n..(p + 1) * n], d) as f32;
            }
        }
        da
    });
    let db = need_db.then(|| {
        let mut db = vec![0.0f64; k * n];
        for i in 0..m {
            let d = &dout[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(&mut db[p * n..(p + 1) * n], a[i * k + p] as f64, d);
            }
        }
        narrow(db)
    });
    (da, db)
}

/// 1×1 convolution: a per-pixel `[c] → [f]` linear map.
pub fn pointwise_forward(x: &[f32], w: &[f32], pixels: usize, c: usize, f: usize) -> Vec<f32> {
    add_macs((pixels * c * f) as u64);
    matmul(x, w, pixels, c, f, None)
}

/// Bin bounds for adaptive pooling of `n` inputs into `out` bins.
pub fn adaptive_bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = (i * n) / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end.max(start + 1))
}

pub fn adaptive_avg_pool_forward(x: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; oh * ow * c];
    for i in 0..oh {
        let (y0, y1) = adaptive_bin(i, h, oh);
        for j in 0..ow {
            let (x0, x1) = adaptive_bin(j, w, ow);
            let o = &mut out[(i * ow + j) * c..][..c];
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for xx in x0..x1 {
                    axpy(o, inv, &x[(y * w + xx) * c..][..c]);
                }
            }
        }
    }
    narrow(out)
}

pub fn adaptive_avg_pool_backward(dout: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut dx = vec![0.0f64; h * w * c];
    for i in 0..oh {
        let (y0, y1) = adaptive_bin(i, h, oh);
        for j in 0..ow {
            let (x0, x1) = adaptive_bin(j, w, ow);
            let d = &dout[(i * ow + j) * c..][..c];
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for xx in x0..x1 {
                    axpy(&mut dx[(y * w + xx) * c..][..c], inv, d);
                }
            }
        }
    }
    narrow(dx)
}

/// Average pooling over a padded window; padded taps count as zeros.
pub fn avg_pool_forward(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let xp = pad_input(x, g);
    let (wp, c, s) = (g.wp(), g.c, g.stride);
    let inv = 1.0 / (g.kh * g.kw) as f64;
    let mut out = vec![0.0f64; g.oh * g.ow * c];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * c..][..c];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    axpy(o, inv, &xp[((oy * s + ky) * wp + ox * s + kx) * c..][..c]);
                }
            }
        }
    }
    narrow(out)
}

pub fn avg_pool_backward(dout: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (wp, c, s) = (g.wp(), g.c, g.stride);
    let inv = 1.0 / (g.kh * g.kw) as f64;
    let mut dxp = vec![0.0f64; g.hp() * wp * c];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = &dout[(oy * g.ow + ox) * c..][..c];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    axpy(&mut dxp[((oy * s + ky) * wp + ox * s + kx) * c..][..c], inv, d);
                }
            }
        }
    }
    crop_padded(&narrow(dxp), g)
}

/// 2×2 max pooling, stride 2, trailing odd row/column dropped.
/// Returns the output and, per output element, the flat input index of the max.
pub fn max_pool2_forward(x: &[f32], h: usize, w: usize, c: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0u32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = ((oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn upsample2_forward(x: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let ow = w * 2;
    let mut out = vec![0.0; h * 2 * ow * c];
    for y in 0..h * 2 {
        for xx in 0..ow {
            out[(y * ow + xx) * c..][..c].copy_from_slice(&x[((y / 2) * w + xx / 2) * c..][..c]);
        }
    }
    out
}

pub fn upsample2_backward(dout: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let ow = w * 2;
    let mut dx = vec![0.0; h * w * c];
    for y in 0..h * 2 {
        for xx in 0..ow {
            let d = &dout[(y * ow + xx) * c..][..c];
            for (acc, v) in dx[((y / 2) * w + xx / 2) * c..][..c].iter_mut().zip(d) {
                *acc += v;
            }
        }
    }
    dx
}

/// Source taps for one output coordinate of a half-pixel-centre bilinear
/// resize: `src = (dst + 0.5)·n/out − 0.5`, clamped to `[0, n−1]`.
pub fn bilinear_taps(dst: usize, n: usize, out: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

pub fn resize_bilinear_forward(x: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let cols: Vec<_> = (0..ow).map(|j| bilinear_taps(j, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        let (y0, y1, fy) = bilinear_taps(i, h, oh);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let at = |y: usize, xx: usize| x[(y * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(dout: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let cols: Vec<_> = (0..ow).map(|j| bilinear_taps(j, w, ow)).collect();
    let mut dx = vec![0.0f64; h * w * c];
    for i in 0..oh {
        let (y0, y1, fy) = bilinear_taps(i, h, oh);
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let d = dout[(i * ow + j) * c + ch] as f64;
                dx[(y0 * w + x0) * c + ch] += d * (1.0 - fy) * (1.0 - fx);
                dx[(y0 * w + x1) * c + ch] += d * (1.0 - fy) * fx;
                dx[(y1 * w + x0) * c + ch] += d * fy * (1.0 - fx);
                dx[(y1 * w + x1) * c + ch] += d * fy * fx;
            }
        }
    }
    narrow(dx)
}

/// Analytic multiply-accumulate counts of a standard `K×K` convolution and
/// its depthwise + pointwise factorization over an `H×W×C` map with `F`
/// output channels (stride 1, same padding).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparableFlops {
    pub standard: u64,
    pub separable: u64,
    pub ratio: f64,
}

pub fn separable_flops(h: u64, w: u64, c: u64, k: u64, f: u64) -> SeparableFlops {
    let standard = h * w * c * k * k * f;
    let separable = h * w * c * (k * k + f);
    SeparableFlops { standard, separable, ratio: standard as f64 / separable as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_puts_extra_on_trailing_edge() {
        let g = ConvGeom::new("t", 5, 4, 1, 2, 2, 1, Padding::Same).unwrap();
        assert_eq!((g.pad_top, g.pad_bottom, g.oh), (0, 1, 5));
        let g = ConvGeom::new("t", 6, 6, 1, 3, 3, 2, Padding::Same).unwrap();
        // out = 3, total = (3-1)*2 + 3 - 6 = 1
        assert_eq!((g.pad_top, g.pad_bottom, g.oh), (0, 1, 3));
        let g = ConvGeom::new("t", 6, 6, 1, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.pad_top, g.pad_bottom, g.oh), (1, 1, 6));
    }

    #[test]
    fn valid_rejects_oversized_kernel() {
        let err = ConvGeom::new("conv2d", 2, 5, 1, 3, 3, 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn adaptive_bins_cover_input() {
        for n in 1..20 {
            for out in 1..12 {
                let mut covered = vec![false; n];
                for i in 0..out {
                    let (a, b) = adaptive_bin(i, n, out);
                    assert!(a < b && b <= n);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn flops_formulas() {
        let f = separable_flops(8, 8, 16, 3, 32);
        assert_eq!(f.standard, 294_912);
        assert_eq!(f.separable, 41_984);
        assert!((f.ratio - 288.0 / 41.0).abs() < 1e-12);
        assert!((separable_flops(4, 4, 3, 1, 1).ratio - 0.5).abs() < 1e-12);
    }
}
