//! Numeric kernels behind the differentiable ops. Everything here works on
//! flat row-major slices; shape validation happens in the callers.
//!
//! Convolutions go through `im2col` + gemm. The column buffer for a batch is
//! laid out as `[c * kh * kw, n * oh * ow]` so one matrix product covers the
//! whole batch.

use super::Float;

/// Spatial geometry of a (non-transposed) convolution from an `h x w` input
/// to an `out_h x out_w` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent of a convolution, or `None` when the kernel does not fit
    /// the padded input.
    pub fn output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if kernel == 0 || stride == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.out_h * self.out_w
    }
}

pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    im2col_into(x, g, &mut col);
    col
}

/// [`im2col`] into a caller-provided buffer of `rows * cols` elements.
pub fn im2col_into<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.cols();
    let out_hw = g.out_h * g.out_w;
    col.fill(T::zero());
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let row_buf = &mut col[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let plane = &x[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let dst = &mut row_buf[b * out_hw + oy * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            // ix = ox + kj - pad; copy the in-range span.
                            let shift = kj as isize - g.pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = ((g.w as isize - shift).min(g.out_w as isize)).max(0) as usize;
                            if lo < hi {
                                let s = (lo as isize + shift) as usize;
                                dst[lo..hi].copy_from_slice(&src_row[s..s + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an NCHW buffer.
pub fn col2im<T: Float>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.n * g.channels * g.h * g.w];
    col2im_add(col, g, &mut x);
    x
}

/// [`col2im`] accumulating into `x`.
pub fn col2im_add<T: Float>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.cols();
    let out_hw = g.out_h * g.out_w;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let row_buf = &col[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let plane = &mut x[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        let src = &row_buf[b * out_hw + oy * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            let shift = kj as isize - g.pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = ((g.w as isize - shift).min(g.out_w as isize)).max(0) as usize;
                            if lo < hi {
                                let s = (lo as isize + shift) as usize;
                                for (d, &v) in dst_row[s..s + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                    *d += v;
                                }
                            }
                        } else {
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn channel_sums<T: Float>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
    }
    sums
}

/// Target width of the column buffer; small feature maps are processed
/// several samples at a time to reach it.
const GROUP_COLS: usize = 1024;

impl ConvGeom {
    /// Samples per group and the geometry of one full group.
    fn grouping(&self) -> (usize, ConvGeom) {
        let per = (GROUP_COLS / (self.out_h * self.out_w)).clamp(1, self.n.max(1));
        (per, ConvGeom { n: per, ..*self })
    }

    fn in_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `[n, c, hw]` -> `[c, n * hw]` into `dst`.
fn gather_cm<T: Float>(x: &[T], n: usize, c: usize, hw: usize, dst: &mut [T]) {
    for b in 0..n {
        for ch in 0..c {
            dst[(ch * n + b) * hw..][..hw].copy_from_slice(&x[(b * c + ch) * hw..][..hw]);
        }
    }
}

/// `[c, n * hw]` -> `[n, c, hw]` into `dst`.
fn scatter_cm<T: Float>(m: &[T], n: usize, c: usize, hw: usize, dst: &mut [T]) {
    for b in 0..n {
        for ch in 0..c {
            dst[(b * c + ch) * hw..][..hw].copy_from_slice(&m[(ch * n + b) * hw..][..hw]);
        }
    }
}

/// Iterates `(first_sample, group_geometry)` over the batch.
fn groups(g: &ConvGeom) -> impl Iterator<Item = (usize, ConvGeom)> {
    let (per, _) = g.grouping();
    let g = *g;
    (0..g.n).step_by(per).map(move |b| {
        (
            b,
            ConvGeom {
                n: per.min(g.n - b),
                ..g
            },
        )
    })
}

/// Cross-correlation. `weight` is `[c_out, g.channels, kh, kw]`.
///
/// The batch is processed in groups of samples so the column buffer stays
/// cache-sized.
pub fn conv2d_forward<T: Float>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom, c_out: usize) -> Vec<T> {
    let (_, full) = g.grouping();
    let hw = g.out_hw();
    let mut col = vec![T::zero(); full.rows() * full.cols()];
    let mut tmp = vec![T::zero(); c_out * full.cols()];
    let mut out = vec![T::zero(); g.n * c_out * hw];
    for (b, gg) in groups(g) {
        let (col, tmp) = (&mut col[..gg.rows() * gg.cols()], &mut tmp[..c_out * gg.cols()]);
        im2col_into(&x[b * g.in_len()..][..gg.n * g.in_len()], &gg, col);
        let dst = &mut out[b * c_out * hw..][..gg.n * c_out * hw];
        if gg.n == 1 {
            T::gemm(c_out, gg.rows(), hw, weight, false, col, false, T::zero(), dst);
        } else {
            T::gemm(c_out, gg.rows(), gg.cols(), weight, false, col, false, T::zero(), tmp);
            scatter_cm(tmp, gg.n, c_out, hw, dst);
        }
    }
    add_channel_bias(&mut out, bias, g.n, c_out, hw);
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    c_out: usize,
    need_input: bool,
) -> ConvGrads<T> {
    let (_, full) = g.grouping();
    let hw = g.out_hw();
    let k = full.rows();
    let mut col = vec![T::zero(); k * full.cols()];
    let mut dout_cm = vec![T::zero(); c_out * full.cols()];
    let mut dw = vec![T::zero(); c_out * k];
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    for (b, gg) in groups(g) {
        let p = gg.cols();
        let col = &mut col[..k * p];
        let dout_src = &grad_out[b * c_out * hw..][..gg.n * c_out * hw];
        let dout: &[T] = if gg.n == 1 {
            dout_src
        } else {
            gather_cm(dout_src, gg.n, c_out, hw, &mut dout_cm[..c_out * p]);
            &dout_cm[..c_out * p]
        };
        im2col_into(&x[b * g.in_len()..][..gg.n * g.in_len()], &gg, col);
        T::gemm(c_out, p, k, dout, false, col, true, T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            T::gemm(k, c_out, p, weight, true, dout, false, T::zero(), col);
            col2im_add(col, &gg, &mut dx[b * g.in_len()..][..gg.n * g.in_len()]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: channel_sums(grad_out, g.n, c_out, hw),
    }
}

/// Transposed convolution. `x` is `[g.n, c_in, g.out_h, g.out_w]`, `weight`
/// is `[c_in, g.channels, kh, kw]` and the result is `[g.n, g.channels, g.h, g.w]`,
/// i.e. `g` describes the convolution this op is the adjoint of.
pub fn conv_transpose2d_forward<T: Float>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom, c_in: usize) -> Vec<T> {
    let (_, full) = g.grouping();
    let hw = g.out_hw();
    let mut cols = vec![T::zero(); full.rows() * full.cols()];
    let mut x_cm = vec![T::zero(); c_in * full.cols()];
    let mut out = vec![T::zero(); g.n * g.in_len()];
    for (b, gg) in groups(g) {
        let p = gg.cols();
        let xs = &x[b * c_in * hw..][..gg.n * c_in * hw];
        let xg: &[T] = if gg.n == 1 {
            xs
        } else {
            gather_cm(xs, gg.n, c_in, hw, &mut x_cm[..c_in * p]);
            &x_cm[..c_in * p]
        };
        let cols = &mut cols[..gg.rows() * p];
        T::gemm(gg.rows(), c_in, p, weight, true, xg, false, T::zero(), cols);
        col2im_add(cols, &gg, &mut out[b * g.in_len()..][..gg.n * g.in_len()]);
    }
    add_channel_bias(&mut out, bias, g.n, g.channels, g.h * g.w);
    out
}

pub fn conv_transpose2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    c_in: usize,
    need_input: bool,
) -> ConvGrads<T> {
    let (_, full) = g.grouping();
    let hw = g.out_hw();
    let k = full.rows();
    let mut dcol = vec![T::zero(); k * full.cols()];
    let mut x_cm = vec![T::zero(); c_in * full.cols()];
    let mut dx_cm = vec![T::zero(); c_in * full.cols()];
    let mut dw = vec![T::zero(); c_in * k];
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    for (b, gg) in groups(g) {
        let p = gg.cols();
        let dcol = &mut dcol[..k * p];
        im2col_into(&grad_out[b * g.in_len()..][..gg.n * g.in_len()], &gg, dcol);
        let xs = &x[b * c_in * hw..][..gg.n * c_in * hw];
        let xg: &[T] = if gg.n == 1 {
            xs
        } else {
            gather_cm(xs, gg.n, c_in, hw, &mut x_cm[..c_in * p]);
            &x_cm[..c_in * p]
        };
        T::gemm(c_in, p, k, xg, false, dcol, true, T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[b * c_in * hw..][..gg.n * c_in * hw];
            if gg.n == 1 {
                T::gemm(c_in, k, p, weight, false, dcol, false, T::zero(), dst);
            } else {
                let tmp = &mut dx_cm[..c_in * p];
                T::gemm(c_in, k, p, weight, false, dcol, false, T::zero(), tmp);
                scatter_cm(tmp, gg.n, c_in, hw, dst);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: channel_sums(grad_out, g.n, g.channels, g.h * g.w),
    }
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], n: usize, c: usize, hw: usize) {
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            for v in &mut out[(b * c + ch) * hw..][..hw] {
                *v += bv;
            }
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, for every
/// output, the flat input index it was taken from. Ties resolve to the first
/// position in row-major order.
pub fn max_pool2x2_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2x2_backward<T: Float>(grad_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

pub fn avg_pool2x2_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter);
            }
        }
    }
    out
}

pub fn avg_pool2x2_backward<T: Float>(grad_out: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(p * oh + oy) * ow + ox] * quarter;
                let i = base + 2 * oy * w + 2 * ox;
                dx[i] += g;
                dx[i + 1] += g;
                dx[i + w] += g;
                dx[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Per-channel batch statistics `(mean, biased variance)` over `n x hw`.
pub fn channel_moments<T: Float>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw).unwrap();
    let mean: Vec<T> = channel_sums(x, n, c, hw).into_iter().map(|s| s / count).collect();
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
    }
    for v in &mut var {
        *v = *v / count;
    }
    (mean, var)
}

/// Normalizes each channel with the given statistics, returning the output
/// and the normalized (pre-affine) values.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_apply<T: Float>(
    x: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Gradients of batch normalization. With `batch_stats` the mean and
/// variance are functions of the input (training mode); otherwise they are
/// constants (inference mode).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Float>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += grad_out[i] * xhat[i];
                dbeta[ch] += grad_out[i];
            }
        }
    }
    let m = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); grad_out.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + hw {
                dx[i] = if batch_stats {
                    // (1/m) * gamma * inv_std * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                    scale * (grad_out[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Normalized 1-D Gaussian window of odd `size`.
pub fn gaussian_window<T: Float>(size: usize, sigma: f64) -> Vec<T> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::of(v / total)).collect()
}

/// Separable "valid" correlation of each `h x w` plane with `window`
/// (applied along both axes). Output planes are `(h-k+1) x (w-k+1)`.
pub fn separable_filter_valid<T: Float>(x: &[T], planes: usize, h: usize, w: usize, window: &[T]) -> Vec<T> {
    let k = window.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..][..h * w];
        for y in 0..h {
            let row = &plane[y * w..][..w];
            for ox in 0..ow {
                let mut acc = T::zero();
                for (j, &g) in window.iter().enumerate() {
                    acc += g * row[ox + j];
                }
                tmp[y * ow + ox] = acc;
            }
        }
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for (i, &g) in window.iter().enumerate() {
                let src = &tmp[(oy + i) * ow..][..ow];
                for (d, &s) in dst[oy * ow..][..ow].iter_mut().zip(src) {
                    *d += g * s;
                }
            }
        }
    }
    out
}

/// Adjoint of [`separable_filter_valid`].
pub fn separable_filter_valid_adjoint<T: Float>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: &[T],
) -> Vec<T> {
    let k = window.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        let src = &grad_out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for (i, &g) in window.iter().enumerate() {
                let dst = &mut tmp[(oy + i) * ow..][..ow];
                for (d, &s) in dst.iter_mut().zip(&src[oy * ow..][..ow]) {
                    *d += g * s;
                }
            }
        }
        let plane = &mut dx[p * h * w..][..h * w];
        for y in 0..h {
            for ox in 0..ow {
                let t = tmp[y * ow + ox];
                for (j, &g) in window.iter().enumerate() {
                    plane[y * w + ox + j] += g * t;
                }
            }
        }
    }
    dx
}
