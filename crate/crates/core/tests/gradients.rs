mod common;

use common::*;
use renetd_core::losses::{objective, LossKind};
use renetd_core::model::{ModelConfig, ModelParams};
use renetd_core::tensor::{BatchNormMode, Tensor, Var};

fn assert_op(name: &str, case: fn(u64) -> f64) {
    for seed in 0..FD_TRIALS {
        let err = case(seed);
        assert!(err < FD_TOLERANCE, "{name} seed {seed}: relative error {err:.3e}");
    }
}

#[test]
fn conv2d_gradients() {
    assert_op("conv2d", OPS[0].1);
}

#[test]
fn conv_transpose2d_gradients() {
    assert_op("conv_transpose2d", OPS[1].1);
}

#[test]
fn max_pool2d_gradients() {
    assert_op("max_pool2d", OPS[2].1);
}

#[test]
fn batch_norm2d_gradients() {
    assert_op("batch_norm2d", OPS[3].1);
}

#[test]
fn relu_gradients() {
    assert_op("relu", OPS[4].1);
}

#[test]
fn loss_gradients() {
    for kind in LossKind::ALL {
        for seed in 0..FD_TRIALS {
            let err = loss_case(kind, seed);
            assert!(err < FD_TOLERANCE, "{kind} seed {seed}: relative error {err:.3e}");
        }
    }
}

#[test]
fn elementwise_gradients() {
    for seed in 0..FD_TRIALS {
        let mut r = rng(seed);
        let a = random(&[3, 4], 0.1, 2.0, &mut r);
        let b = random(&[3, 4], -1.0, 1.0, &mut r);
        let err = gradient_error(&[a, b], |v| {
            let s = v[0].sqrt()?.mul(&v[1].sigmoid()?)?;
            let t = v[0].sub(&v[1])?.abs()?.square()?.scale(0.5)?.add_scalar(1.0)?;
            project(s.add(&t)?, seed)?.add(&v[0].mean()?)
        });
        assert!(err < FD_TOLERANCE, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn concat_and_avg_pool_gradients() {
    for seed in 0..FD_TRIALS {
        let mut r = rng(seed);
        let a = random(&[2, 1, 4, 6], -1.0, 1.0, &mut r);
        let b = random(&[2, 2, 4, 6], -1.0, 1.0, &mut r);
        let err = gradient_error(&[a, b], |v| {
            project(Var::concat_channels(&[v[0].clone(), v[1].clone()])?.avg_pool2d()?, seed)
        });
        assert!(err < FD_TOLERANCE, "seed {seed}: {err:.3e}");
    }
}

/// <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> for matched geometry.
#[test]
fn conv_duality() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let (k, stride, pad) = [(1, 1, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1), (5, 2, 2)][(seed % 5) as usize];
        let (cin, cout) = (3, 4);
        let h = 8 + (seed % 3) as usize;
        let w = h;
        let x = random(&[2, cin, h, w], -1.0, 1.0, &mut r);
        let weight = random(&[cout, cin, k, k], -1.0, 1.0, &mut r);
        let conv = Var::constant(x.clone())
            .conv2d(
                &Var::constant(weight.clone()),
                &Var::constant(Tensor::zeros(&[cout])),
                stride,
                pad,
            )
            .unwrap();
        let y_shape = conv.shape();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        assert_eq!(y_shape, vec![2, cout, oh, ow]);
        let y = random(&y_shape, -1.0, 1.0, &mut r);
        // Output padding recovers the input extent lost to flooring.
        let op = h - ((oh - 1) * stride + k - 2 * pad);
        assert_eq!(ow, oh);

        let lhs: f64 = conv.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        // [c_out, c_in, k, k] for conv2d reads as [c_in, c_out, k, k] for the adjoint.
        let adj = Var::constant(y.clone())
            .conv_transpose2d(
                &Var::constant(weight.clone()),
                &Var::constant(Tensor::zeros(&[cin])),
                stride,
                pad,
                op,
            )
            .unwrap();
        assert_eq!(adj.shape(), x.shape());
        let rhs: f64 = x.data().iter().zip(adj.value().data()).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0),
            "seed {seed}: {lhs} vs {rhs}"
        );
    }
}

/// Finite differences through the whole network on sampled coordinates.
#[test]
fn full_model_gradients() {
    let cfg = ModelConfig::with_block_size(16);
    let params = ModelParams::build(cfg, 7).unwrap();
    let bound = params.bind::<f64>(true);
    let loss_cfg = small_loss_config(LossKind::L1Ssim);
    let mut r = rng(11);
    let src = Var::constant(random(&[2, 1, 16, 16], 0.0, 1.0, &mut r));
    let loss = |b: &renetd_core::model::BoundModel<f64>| {
        let rec = b.forward(&src, BatchNormMode::Train).unwrap();
        objective(&src, &rec, b.conv_weights(), &loss_cfg).unwrap()
    };
    bound.zero_grad();
    loss(&bound).backward().unwrap();

    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0;
    for (name, var) in bound.learnable() {
        let grad = var.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        let n = grad.len();
        for &i in &[0, n / 2, n - 1] {
            let x0 = var.value().data()[i];
            var.update(|t| t.data_mut()[i] = x0 + FD_STEP);
            let up = loss(&bound).item();
            var.update(|t| t.data_mut()[i] = x0 - FD_STEP);
            let down = loss(&bound).item();
            var.update(|t| t.data_mut()[i] = x0);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            checked += 1;
        }
    }
    let err = diff.sqrt() / na.sqrt().max(nn.sqrt());
    assert!(checked > 30);
    assert!(
        err < FD_TOLERANCE,
        "full model relative error {err:.3e} over {checked} coordinates"
    );
}
