//! Shared helpers for the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use renetd_core::tensor::{BatchNormMode, Tensor, Var};
use renetd_core::Result;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-3;
pub const FD_TRIALS: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` of the gradient of
/// `f` with respect to every input, using central differences.
pub fn gradient_error(inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>) -> f64 {
    let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::parameter).collect();
    f(&vars).unwrap().backward().unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> f64 {
        let vs: Vec<Var<f64>> = values.iter().cloned().map(Var::constant).collect();
        f(&vs).unwrap().item()
    };
    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let x0 = inputs[t].data()[i];
            work[t].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&work);
            work[t].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&work);
            work[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[i];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    let scale = norm_a.sqrt().max(norm_n.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Reduces a tensor-valued op to a scalar with fixed random weights so every
/// output element contributes to the checked gradient.
pub fn project(out: Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut r = rng(seed ^ 0xa5a5);
    let w = Var::constant(random(&out.shape(), -1.0, 1.0, &mut r));
    out.mul(&w)?.sum()
}

pub type OpCheck = (&'static str, fn(u64) -> f64);

fn conv2d_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let k = [1, 3, 5][(seed % 3) as usize];
    let pad = k / 2;
    let x = random(&[2, 2, 7, 6], -1.0, 1.0, &mut r);
    let w = random(&[3, 2, k, k], -1.0, 1.0, &mut r);
    let b = random(&[3], -1.0, 1.0, &mut r);
    gradient_error(&[x, w, b], |v| project(v[0].conv2d(&v[1], &v[2], stride, pad)?, seed))
}

fn conv_transpose2d_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, stride, pad, op) =
        [(3, 1, 1, 0), (5, 2, 2, 1), (1, 1, 0, 0), (3, 2, 1, 1), (5, 1, 2, 0)][(seed % 5) as usize];
    let x = random(&[2, 3, 4, 5], -1.0, 1.0, &mut r);
    let w = random(&[3, 2, k, k], -1.0, 1.0, &mut r);
    let b = random(&[2], -1.0, 1.0, &mut r);
    gradient_error(&[x, w, b], |v| {
        project(v[0].conv_transpose2d(&v[1], &v[2], stride, pad, op)?, seed)
    })
}

fn max_pool2d_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random(&[2, 3, 6, 8], -1.0, 1.0, &mut r);
    gradient_error(&[x], |v| project(v[0].max_pool2d()?, seed))
}

fn batch_norm2d_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random(&[3, 2, 4, 5], -2.0, 2.0, &mut r);
    let gamma = random(&[2], 0.5, 1.5, &mut r);
    let beta = random(&[2], -0.5, 0.5, &mut r);
    let mode = if seed.is_multiple_of(2) {
        BatchNormMode::Train
    } else {
        BatchNormMode::Eval
    };
    let rm = random(&[2], -0.2, 0.2, &mut r);
    let rv = random(&[2], 0.5, 1.5, &mut r);
    gradient_error(&[x, gamma, beta], |v| {
        let m = Var::constant(rm.clone());
        let s = Var::constant(rv.clone());
        project(v[0].batch_norm2d(&v[1], &v[2], &m, &s, mode, 1e-5, 0.1)?, seed)
    })
}

fn relu_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
    gradient_error(&[x], |v| project(v[0].relu()?, seed))
}

pub const OPS: [OpCheck; 5] = [
    ("conv2d", conv2d_case),
    ("conv_transpose2d", conv_transpose2d_case),
    ("max_pool2d", max_pool2d_case),
    ("batch_norm2d", batch_norm2d_case),
    ("relu", relu_case),
];

pub fn small_loss_config(kind: renetd_core::losses::LossKind) -> renetd_core::losses::LossConfig {
    renetd_core::losses::LossConfig {
        kind,
        ssim_window: 5,
        ms_scales: 2,
        lambda_reg: 1e-2,
        alpha: 0.4,
        ..Default::default()
    }
}

/// Gradient of a loss with respect to the reconstruction and the penalized
/// weights.
pub fn loss_case(kind: renetd_core::losses::LossKind, seed: u64) -> f64 {
    use renetd_core::losses::objective;
    let mut r = rng(seed);
    let cfg = small_loss_config(kind);
    let src = random(&[2, 1, 12, 12], 0.0, 1.0, &mut r);
    let rec = random(&[2, 1, 12, 12], 0.0, 1.0, &mut r);
    let w1 = random(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
    let w2 = random(&[1, 2, 1, 1], -1.0, 1.0, &mut r);
    let src = Var::constant(src);
    gradient_error(&[rec, w1, w2], |v| objective(&src, &v[0], &v[1..], &cfg))
}
