//! Reconstruction objectives: pixel losses with a Frobenius-norm weight
//! penalty, windowed SSIM, multi-scale SSIM and the weighted L1 + SSIM
//! combination the detector is trained with.

use std::fmt;
use std::str::FromStr;

use crate::data::reflect_index;
use crate::error::{Error, Result};
use crate::tensor::kernels::{gaussian_window, separable_filter_valid, separable_filter_valid_adjoint};
use crate::tensor::{Float, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    L1,
    Ssim,
    MseSsim,
    L1Ssim,
    MsSsim,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::L1,
        LossKind::Mse,
        LossKind::MseSsim,
        LossKind::L1Ssim,
        LossKind::Ssim,
        LossKind::MsSsim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::L1 => "l1",
            LossKind::Ssim => "ssim",
            LossKind::MseSsim => "mse+ssim",
            LossKind::L1Ssim => "l1+ssim",
            LossKind::MsSsim => "ms_ssim",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', '-', ' '], "");
        Ok(match norm.as_str() {
            "mse" | "l2" => LossKind::Mse,
            "l1" => LossKind::L1,
            "ssim" => LossKind::Ssim,
            "mse+ssim" | "l2+ssim" => LossKind::MseSsim,
            "l1+ssim" | "combined" => LossKind::L1Ssim,
            "msssim" => LossKind::MsSsim,
            _ => {
                return Err(Error::Config(format!(
                    "unknown loss kind '{s}' (expected one of l1, mse, ssim, mse+ssim, l1+ssim, ms_ssim)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the pixel term in the combined losses.
    pub alpha: f64,
    /// Coefficient of the Frobenius-norm weight penalty.
    pub lambda_reg: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of pixel values.
    pub dynamic_range: f64,
    /// Number of scales for multi-scale SSIM.
    pub ms_scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::L1Ssim,
            alpha: 0.15,
            lambda_reg: 1e-4,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            ms_scales: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_reg must be a non-negative number, got {}",
                self.lambda_reg
            )));
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ssim_window must be odd, got {}",
                self.ssim_window
            )));
        }
        if self.ssim_sigma.is_nan() || self.ssim_sigma <= 0.0 {
            return Err(Error::Config("ssim_sigma must be positive".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config("K1 and K2 must be positive".into()));
        }
        if self.dynamic_range.is_nan() || self.dynamic_range <= 0.0 {
            return Err(Error::Config("dynamic range must be positive".into()));
        }
        if self.ms_scales == 0 {
            return Err(Error::Config("ms_scales must be at least 1".into()));
        }
        Ok(())
    }

    /// Validates against the patch size the loss will be evaluated on.
    pub fn validate_for_block(&self, block: usize) -> Result<()> {
        self.validate()?;
        if self.ssim_window > block {
            return Err(Error::Config(format!(
                "ssim_window {} exceeds block size {block}",
                self.ssim_window
            )));
        }
        if self.kind == LossKind::MsSsim {
            let max = max_ms_scales(block, block, self.ssim_window);
            if self.ms_scales > max {
                return Err(Error::Config(format!(
                    "{} MS-SSIM scales do not fit a {block}px block with window {} (max {max})",
                    self.ms_scales, self.ssim_window
                )));
            }
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Largest number of dyadic scales at which an `h x w` image still holds a
/// full SSIM window.
pub fn max_ms_scales(h: usize, w: usize, window: usize) -> usize {
    let (mut h, mut w, mut m) = (h, w, 0);
    while h >= window && w >= window {
        m += 1;
        if h % 2 != 0 || w % 2 != 0 {
            break;
        }
        h /= 2;
        w /= 2;
    }
    m
}

fn check_pair<T: Float>(op: &'static str, src: &Var<T>, rec: &Var<T>) -> Result<()> {
    if src.shape() != rec.shape() {
        return Err(Error::shape(
            op,
            format!("source {:?} vs reconstruction {:?}", src.shape(), rec.shape()),
        ));
    }
    Ok(())
}

/// `sqrt(sum of squares)` over all given tensors.
pub fn frobenius_norm<T: Float>(weights: &[Var<T>]) -> Result<Var<T>> {
    let mut acc: Option<Var<T>> = None;
    for w in weights {
        let s = w.square()?.sum()?;
        acc = Some(match acc {
            Some(a) => a.add(&s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => a.sqrt(),
        None => Ok(Var::constant(Tensor::scalar(T::zero()))),
    }
}

fn with_penalty<T: Float>(pixel: Var<T>, weights: &[Var<T>], lambda: f64) -> Result<Var<T>> {
    if lambda == 0.0 || weights.is_empty() {
        return Ok(pixel);
    }
    pixel.add(&frobenius_norm(weights)?.scale(lambda)?)
}

/// Mean squared error plus `lambda * ||weights||_F`.
pub fn mse_loss<T: Float>(src: &Var<T>, rec: &Var<T>, weights: &[Var<T>], lambda: f64) -> Result<Var<T>> {
    check_pair("mse_loss", src, rec)?;
    let pixel = rec.sub(src)?.square()?.mean()?;
    with_penalty(pixel, weights, lambda)
}

/// Mean absolute error plus `lambda * ||weights||_F`.
pub fn l1_loss<T: Float>(src: &Var<T>, rec: &Var<T>, weights: &[Var<T>], lambda: f64) -> Result<Var<T>> {
    check_pair("l1_loss", src, rec)?;
    let pixel = rec.sub(src)?.abs()?.mean()?;
    with_penalty(pixel, weights, lambda)
}

/// Local statistics of an image pair over every window position.
struct WindowStats<T> {
    mx: Vec<T>,
    my: Vec<T>,
    exx: Vec<T>,
    eyy: Vec<T>,
    exy: Vec<T>,
}

struct SsimGeometry {
    planes: usize,
    h: usize,
    w: usize,
}

impl SsimGeometry {
    /// The same planes grown by `r` pixels on every side.
    fn padded(&self, r: usize) -> SsimGeometry {
        SsimGeometry {
            planes: self.planes,
            h: self.h + 2 * r,
            w: self.w + 2 * r,
        }
    }
}

/// Symmetric reflection of every plane by `r` pixels, so each source pixel
/// is the centre of one window.
fn reflect_pad<T: Float>(v: &[T], g: &SsimGeometry, r: usize) -> Vec<T> {
    let p = g.padded(r);
    let mut out = Vec::with_capacity(p.planes * p.h * p.w);
    for plane in v.chunks_exact(g.h * g.w) {
        for pr in 0..p.h {
            let sr = reflect_index(pr as isize - r as isize, g.h);
            for pc in 0..p.w {
                out.push(plane[sr * g.w + reflect_index(pc as isize - r as isize, g.w)]);
            }
        }
    }
    out
}

/// Adjoint of [`reflect_pad`]: sums padded gradients onto their sources.
fn reflect_fold<T: Float>(v: &[T], g: &SsimGeometry, r: usize) -> Vec<T> {
    let p = g.padded(r);
    let mut out = vec![T::zero(); g.planes * g.h * g.w];
    for (plane, src) in out.chunks_exact_mut(g.h * g.w).zip(v.chunks_exact(p.h * p.w)) {
        for pr in 0..p.h {
            let sr = reflect_index(pr as isize - r as isize, g.h);
            for pc in 0..p.w {
                plane[sr * g.w + reflect_index(pc as isize - r as isize, g.w)] += src[pr * p.w + pc];
            }
        }
    }
    out
}

fn ssim_geometry(op: &'static str, shape: &[usize], window: usize) -> Result<SsimGeometry> {
    let (planes, h, w) = match *shape {
        [n, c, h, w] => (n * c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(Error::shape(op, format!("expected NCHW or HW input, got {shape:?}"))),
    };
    if window > h || window > w {
        return Err(Error::shape(
            op,
            format!("SSIM window {window} is larger than the {h}x{w} image"),
        ));
    }
    Ok(SsimGeometry { planes, h, w })
}

fn window_stats<T: Float>(x: &[T], y: &[T], g: &SsimGeometry, win: &[T]) -> WindowStats<T> {
    let f = |v: &[T]| separable_filter_valid(v, g.planes, g.h, g.w, win);
    let xx: Vec<T> = x.iter().map(|&a| a * a).collect();
    let yy: Vec<T> = y.iter().map(|&a| a * a).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    WindowStats {
        mx: f(x),
        my: f(y),
        exx: f(&xx),
        eyy: f(&yy),
        exy: f(&xy),
    }
}

/// Per-window SSIM values with luminance, contrast and structure exponents
/// of 1 and `C3 = C2 / 2`, which reduces to
/// `(2 mx my + C1)(2 sxy + C2) / ((mx² + my² + C1)(sx² + sy² + C2))`.
fn ssim_terms<T: Float>(s: &WindowStats<T>, c1: T, c2: T) -> Vec<[T; 5]> {
    let two = T::of(2.0);
    (0..s.mx.len())
        .map(|i| {
            let (mx, my) = (s.mx[i], s.my[i]);
            let sx = s.exx[i] - mx * mx;
            let sy = s.eyy[i] - my * my;
            let sxy = s.exy[i] - mx * my;
            let a1 = two * mx * my + c1;
            let a2 = two * sxy + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = sx + sy + c2;
            [a1 * a2 / (b1 * b2), a1, a2, b1, b2]
        })
        .collect()
}

/// Gradient of `sum_p coef * S_p` with respect to the second image of the
/// pair described by `(mine, other)` statistics.
#[allow(clippy::too_many_arguments)]
fn ssim_input_grad<T: Float>(
    terms: &[[T; 5]],
    m_self: &[T],
    m_other: &[T],
    self_img: &[T],
    other_img: &[T],
    coef: T,
    g: &SsimGeometry,
    win: &[T],
) -> Vec<T> {
    let two = T::of(2.0);
    let n = terms.len();
    let mut d_m = vec![T::zero(); n];
    let mut d_ee = vec![T::zero(); n];
    let mut d_cross = vec![T::zero(); n];
    for i in 0..n {
        let [s, a1, a2, b1, b2] = terms[i];
        let denom = b1 * b2;
        let ds_a1 = a2 / denom;
        let ds_a2 = a1 / denom;
        let ds_b1 = -s / b1;
        let ds_b2 = -s / b2;
        let (ms, mo) = (m_self[i], m_other[i]);
        d_m[i] = coef * (two * mo * (ds_a1 - ds_a2) + two * ms * (ds_b1 - ds_b2));
        d_ee[i] = coef * ds_b2;
        d_cross[i] = coef * two * ds_a2;
    }
    let adj = |v: &[T]| separable_filter_valid_adjoint(v, g.planes, g.h, g.w, win);
    let gm = adj(&d_m);
    let ge = adj(&d_ee);
    let gc = adj(&d_cross);
    (0..self_img.len())
        .map(|i| gm[i] + two * self_img[i] * ge[i] + other_img[i] * gc[i])
        .collect()
}

/// Mean SSIM over Gaussian windows centred on every pixel (and all planes),
/// with borders reflected.
pub fn ssim<T: Float>(x: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let g = ssim_geometry("ssim", x.shape(), cfg.ssim_window)?;
    let r = cfg.ssim_window / 2;
    let win: Vec<T> = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let stats = window_stats(
        &reflect_pad(x.data(), &g, r),
        &reflect_pad(y.data(), &g, r),
        &g.padded(r),
        &win,
    );
    let terms = ssim_terms(&stats, T::of(cfg.c1()), T::of(cfg.c2()));
    let total: T = terms.iter().map(|t| t[0]).sum();
    Ok((total / T::from_usize(terms.len()).unwrap()).to_f64().unwrap())
}

/// Differentiable mean SSIM as a scalar variable.
pub fn ssim_index<T: Float>(x: &Var<T>, y: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
    check_pair("ssim", x, y)?;
    let g = ssim_geometry("ssim", &x.shape(), cfg.ssim_window)?;
    let r = cfg.ssim_window / 2;
    let gp = g.padded(r);
    let win: Vec<T> = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let xv = reflect_pad(x.value().data(), &g, r);
    let yv = reflect_pad(y.value().data(), &g, r);
    let stats = window_stats(&xv, &yv, &gp, &win);
    let terms = ssim_terms(&stats, T::of(cfg.c1()), T::of(cfg.c2()));
    let count = T::from_usize(terms.len()).unwrap();
    let total: T = terms.iter().map(|t| t[0]).sum();
    let (need_x, need_y) = (x.requires_grad(), y.requires_grad());
    let shape = x.shape();
    Var::from_op(
        "ssim",
        vec![x.clone(), y.clone()],
        Tensor::scalar(total / count),
        move |grad| {
            let coef = grad.item() / count;
            let gx = need_x.then(|| {
                let d = ssim_input_grad(&terms, &stats.mx, &stats.my, &xv, &yv, coef, &gp, &win);
                Tensor::new(shape.clone(), reflect_fold(&d, &g, r)).unwrap()
            });
            let gy = need_y.then(|| {
                let d = ssim_input_grad(&terms, &stats.my, &stats.mx, &yv, &xv, coef, &gp, &win);
                Tensor::new(shape.clone(), reflect_fold(&d, &g, r)).unwrap()
            });
            vec![gx, gy]
        },
    )
}

/// `1 - SSIM(x, y)`.
pub fn ssim_loss<T: Float>(x: &Var<T>, y: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
    ssim_index(x, y, cfg)?.scale(-1.0)?.add_scalar(1.0)
}

/// `1 - prod_m SSIM_m(x, y)` over `cfg.ms_scales` dyadic scales (2x2 average
/// pooling between scales), unweighted.
pub fn ms_ssim_loss<T: Float>(x: &Var<T>, y: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
    check_pair("ms_ssim_loss", x, y)?;
    let shape = x.shape();
    let (h, w) = match shape[..] {
        [_, _, h, w] => (h, w),
        _ => return Err(Error::shape("ms_ssim_loss", format!("expected NCHW, got {shape:?}"))),
    };
    let max = max_ms_scales(h, w, cfg.ssim_window);
    if cfg.ms_scales == 0 || cfg.ms_scales > max {
        return Err(Error::shape(
            "ms_ssim_loss",
            format!(
                "{} scales requested but a {h}x{w} image with window {} supports at most M = {max}",
                cfg.ms_scales, cfg.ssim_window
            ),
        ));
    }
    let (mut xs, mut ys) = (x.clone(), y.clone());
    let mut product = ssim_index(&xs, &ys, cfg)?;
    for _ in 1..cfg.ms_scales {
        xs = xs.avg_pool2d()?;
        ys = ys.avg_pool2d()?;
        product = product.mul(&ssim_index(&xs, &ys, cfg)?)?;
    }
    product.scale(-1.0)?.add_scalar(1.0)
}

/// `alpha * L1 + (1 - alpha) * L_SSIM`, with the weight penalty carried by
/// the L1 term.
pub fn combined_loss<T: Float>(src: &Var<T>, rec: &Var<T>, weights: &[Var<T>], cfg: &LossConfig) -> Result<Var<T>> {
    let pixel = l1_loss(src, rec, weights, cfg.lambda_reg)?;
    blend(pixel, src, rec, cfg)
}

fn blend<T: Float>(pixel: Var<T>, src: &Var<T>, rec: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
    let structural = ssim_loss(src, rec, cfg)?;
    pixel.scale(cfg.alpha)?.add(&structural.scale(1.0 - cfg.alpha)?)
}

/// Evaluates the objective selected by `cfg.kind`.
pub fn objective<T: Float>(src: &Var<T>, rec: &Var<T>, weights: &[Var<T>], cfg: &LossConfig) -> Result<Var<T>> {
    match cfg.kind {
        LossKind::Mse => mse_loss(src, rec, weights, cfg.lambda_reg),
        LossKind::L1 => l1_loss(src, rec, weights, cfg.lambda_reg),
        LossKind::Ssim => ssim_loss(src, rec, cfg),
        LossKind::MsSsim => ms_ssim_loss(src, rec, cfg),
        LossKind::MseSsim => blend(mse_loss(src, rec, weights, cfg.lambda_reg)?, src, rec, cfg),
        LossKind::L1Ssim => combined_loss(src, rec, weights, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(shape: &[usize], data: Vec<f64>) -> Var<f64> {
        Var::constant(Tensor::new(shape.to_vec(), data).unwrap())
    }

    fn cfg() -> LossConfig {
        LossConfig {
            lambda_reg: 0.0,
            ..LossConfig::default()
        }
    }

    #[test]
    fn pixel_losses_on_constant_pairs() {
        let src = c(&[1, 1, 4, 4], vec![0.0; 16]);
        let rec = c(&[1, 1, 4, 4], vec![0.5; 16]);
        assert_eq!(mse_loss(&src, &src, &[], 0.0).unwrap().item(), 0.0);
        assert_eq!(mse_loss(&src, &rec, &[], 0.0).unwrap().item(), 0.25);
        assert_eq!(l1_loss(&src, &src, &[], 0.0).unwrap().item(), 0.0);
        assert_eq!(l1_loss(&src, &rec, &[], 0.0).unwrap().item(), 0.5);
    }

    #[test]
    fn penalty_adds_lambda_times_frobenius_norm() {
        let src = c(&[1, 1, 2, 2], vec![0.0, 0.1, 0.2, 0.3]);
        let rec = c(&[1, 1, 2, 2], vec![0.3, 0.1, 0.0, 0.9]);
        let w1 = c(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let w2 = c(&[3], vec![0.25, -1.5, 2.0]);
        // Independent norm: sqrt of the plain sum of squares.
        let norm = [1.0f64, -2.0, 0.5, 3.0, 0.25, -1.5, 2.0]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let lambda = 0.3;
        let weights = [w1, w2];
        for (with, without) in [
            (
                mse_loss(&src, &rec, &weights, lambda).unwrap().item(),
                mse_loss(&src, &rec, &[], 0.0).unwrap().item(),
            ),
            (
                l1_loss(&src, &rec, &weights, lambda).unwrap().item(),
                l1_loss(&src, &rec, &[], 0.0).unwrap().item(),
            ),
        ] {
            assert!((with - without - lambda * norm).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_loss_shape_mismatch() {
        let a = c(&[1, 1, 2, 2], vec![0.0; 4]);
        let b = c(&[1, 1, 1, 4], vec![0.0; 4]);
        assert!(mse_loss(&a, &b, &[], 0.0).is_err());
        assert!(l1_loss(&a, &b, &[], 0.0).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let data: Vec<f64> = (0..256).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
        let x = Tensor::new(vec![1, 1, 16, 16], data).unwrap();
        assert!((ssim(&x, &x, &cfg()).unwrap() - 1.0).abs() < 1e-6);
    }

    /// Scalar SSIM over one explicit window, written straight from the
    /// definition with Gaussian-weighted moments.
    fn window_ssim_reference(x: &[f64], y: &[f64], w: usize, top: usize, left: usize, k: usize, sigma: f64) -> f64 {
        let r = (k / 2) as f64;
        let mut weights = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
                weights[i * k + j] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        let total: f64 = weights.iter().sum();
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                let wt = weights[i * k + j] / total;
                mx += wt * x[(top + i) * w + left + j];
                my += wt * y[(top + i) * w + left + j];
            }
        }
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                let wt = weights[i * k + j] / total;
                let dx = x[(top + i) * w + left + j] - mx;
                let dy = y[(top + i) * w + left + j] - my;
                vx += wt * dx * dx;
                vy += wt * dy * dy;
                cxy += wt * dx * dy;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let c3 = c2 / 2.0;
        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let cc = (2.0 * vx.sqrt() * vy.sqrt() + c2) / (vx + vy + c2);
        let s = (cxy + c3) / (vx.sqrt() * vy.sqrt() + c3);
        l * cc * s
    }

    /// `n x n` image grown by `r` on each side, mirrored about the edge
    /// pixels' outer boundary (`-1 -> 0`, `n -> n - 1`).
    fn mirror(x: &[f64], n: usize, r: usize) -> Vec<f64> {
        let fold = |mut i: isize| loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n as isize {
                i = 2 * n as isize - 1 - i;
            } else {
                return i as usize;
            }
        };
        let m = n + 2 * r;
        (0..m * m)
            .map(|k| x[fold((k / m) as isize - r as isize) * n + fold((k % m) as isize - r as isize)])
            .collect()
    }

    /// Mean of the explicit-window reference over windows centred on every
    /// pixel of the mirrored pair.
    fn ssim_reference(x: &[f64], y: &[f64], n: usize, k: usize) -> f64 {
        let (xp, yp) = (mirror(x, n, k / 2), mirror(y, n, k / 2));
        let m = n + 2 * (k / 2);
        let mut total = 0.0;
        for top in 0..n {
            for left in 0..n {
                total += window_ssim_reference(&xp, &yp, m, top, left, k, 1.5);
            }
        }
        total / (n * n) as f64
    }

    #[test]
    fn inverted_checkerboard_is_strongly_negative() {
        let n = 16;
        let x: Vec<f64> = (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        let reference = ssim_reference(&x, &y, n, 11);
        let xt = Tensor::new(vec![1, 1, n, n], x).unwrap();
        let yt = Tensor::new(vec![1, 1, n, n], y).unwrap();
        let got = ssim(&xt, &yt, &cfg()).unwrap();
        assert!(got < -0.9, "{got}");
        assert!((got - reference).abs() < 1e-9, "{got} vs {reference}");
    }

    #[test]
    fn ssim_matches_three_factor_reference_on_random_pair() {
        let n = 13;
        let x: Vec<f64> = (0..n * n).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
        let y: Vec<f64> = (0..n * n).map(|i| ((i * 104729) % 89) as f64 / 89.0).collect();
        let reference = ssim_reference(&x, &y, n, 11);
        let got = ssim(
            &Tensor::new(vec![n, n], x).unwrap(),
            &Tensor::new(vec![n, n], y).unwrap(),
            &cfg(),
        )
        .unwrap();
        assert!((got - reference).abs() < 1e-9, "{got} vs {reference}");
    }

    #[test]
    fn ssim_rejects_oversized_window() {
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let err = ssim(&x, &x, &cfg()).unwrap_err();
        assert!(err.to_string().contains("larger"), "{err}");
    }

    #[test]
    fn ms_ssim_scale_limit_reports_max() {
        let x = c(&[1, 1, 32, 32], vec![0.5; 1024]);
        let cfg = LossConfig { ms_scales: 3, ..cfg() };
        let err = ms_ssim_loss(&x, &x, &cfg).unwrap_err();
        assert!(err.to_string().contains("M = 2"), "{err}");
        assert_eq!(max_ms_scales(64, 64, 11), 3);
        assert_eq!(max_ms_scales(16, 16, 11), 1);
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("L1+SSIM".parse::<LossKind>().unwrap(), LossKind::L1Ssim);
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert_eq!("MS_SSIM".parse::<LossKind>().unwrap(), LossKind::MsSsim);
        assert!("huber".parse::<LossKind>().is_err());
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate_for_block(32).is_ok());
        assert!(LossConfig {
            alpha: 1.5,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            ssim_window: 10,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            k1: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig::default().validate_for_block(8).is_err());
        let ms = LossConfig {
            kind: LossKind::MsSsim,
            ..LossConfig::default()
        };
        assert!(ms.validate_for_block(32).is_err());
        assert!(ms.validate_for_block(64).is_ok());
    }
}
