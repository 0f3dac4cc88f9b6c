//! The reconstruction network.
//!
//! ```text
//! input 1xBxB
//!   ├─ conv 1x1 ─┐
//!   ├─ conv 3x3 ─┼─ concat (3 * stem channels)
//!   └─ conv 5x5 ─┘
//! enc1..enc3: conv 5x5 -> BN -> ReLU -> maxpool 2x2
//! enc4:       conv 3x3 -> BN -> ReLU              (bottleneck B/8 x B/8)
//! dec1:       deconv 3x3          -> BN -> ReLU
//! dec2..dec4: deconv 5x5 stride 2 -> BN -> ReLU   (each doubles H, W)
//!   ├─ deconv 1x1 ─┐
//!   ├─ deconv 3x3 ─┼─ mean -> sigmoid -> output 1xBxB
//!   └─ deconv 5x5 ─┘
//! ```

mod checkpoint;

pub use checkpoint::{from_bytes, load, load_expecting, save, to_bytes, FORMAT_VERSION, MAGIC};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Float, Tensor, Var};

pub const ALLOWED_BLOCK_SIZES: [usize; 3] = [16, 32, 64];
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const STEM_KERNELS: [usize; 3] = [1, 3, 5];
const ENCODER_KERNELS: [usize; 4] = [5, 5, 5, 3];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub block_size: usize,
    /// Output channels of each of the three stem convolutions.
    pub stem_channels: usize,
    pub encoder_channels: [usize; 4],
    pub input_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_size: 32,
            stem_channels: 8,
            encoder_channels: [32, 32, 32, 64],
            input_channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn with_block_size(block_size: usize) -> Self {
        ModelConfig {
            block_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_BLOCK_SIZES.contains(&self.block_size) {
            return Err(Error::Config(format!(
                "block size {} is not supported; allowed values are {:?}",
                self.block_size, ALLOWED_BLOCK_SIZES
            )));
        }
        if self.input_channels != 1 {
            return Err(Error::Config(
                "only single-channel (grayscale) input is supported".into(),
            ));
        }
        if self.stem_channels == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Stable 64-bit hash of the architecture-defining fields.
    pub fn fingerprint(&self) -> u64 {
        let canonical = format!(
            "renetd-arch/1;block={};in={};stem={};enc={},{},{},{}",
            self.block_size,
            self.input_channels,
            self.stem_channels,
            self.encoder_channels[0],
            self.encoder_channels[1],
            self.encoder_channels[2],
            self.encoder_channels[3],
        );
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Spatial size of the latent feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.block_size / 8
    }

    fn stem_width(&self) -> usize {
        self.stem_channels * STEM_KERNELS.len()
    }

    /// Every tensor of the architecture, in canonical order.
    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        for k in STEM_KERNELS {
            let name = format!("stem.k{k}");
            specs.push(TensorSpec::weight(
                &name,
                [self.stem_channels, self.input_channels, k, k],
                self.input_channels * k * k,
            ));
            specs.push(TensorSpec::new(
                format!("{name}.bias"),
                vec![self.stem_channels],
                TensorRole::Bias,
            ));
        }
        let enc = self.encoder_channels;
        let mut c_in = self.stem_width();
        for (i, (&c_out, &k)) in enc.iter().zip(&ENCODER_KERNELS).enumerate() {
            let name = format!("enc{}", i + 1);
            specs.push(TensorSpec::weight(
                &format!("{name}.conv"),
                [c_out, c_in, k, k],
                c_in * k * k,
            ));
            specs.push(TensorSpec::new(
                format!("{name}.conv.bias"),
                vec![c_out],
                TensorRole::Bias,
            ));
            push_bn(&mut specs, &name, c_out);
            c_in = c_out;
        }
        // Decoder mirrors the encoder: 64 -> 32 -> 32 -> 32 -> stem width.
        let targets = [enc[2], enc[1], enc[0], self.stem_width()];
        let kernels = [
            ENCODER_KERNELS[3],
            ENCODER_KERNELS[2],
            ENCODER_KERNELS[1],
            ENCODER_KERNELS[0],
        ];
        for (i, (&c_out, &k)) in targets.iter().zip(&kernels).enumerate() {
            let name = format!("dec{}", i + 1);
            let stride = if i == 0 { 1 } else { 2 };
            specs.push(TensorSpec::weight(
                &format!("{name}.deconv"),
                [c_in, c_out, k, k],
                c_in * k * k / (stride * stride),
            ));
            specs.push(TensorSpec::new(
                format!("{name}.deconv.bias"),
                vec![c_out],
                TensorRole::Bias,
            ));
            push_bn(&mut specs, &name, c_out);
            c_in = c_out;
        }
        for k in STEM_KERNELS {
            let name = format!("head.k{k}");
            specs.push(TensorSpec::weight(
                &name,
                [c_in, self.input_channels, k, k],
                c_in * k * k,
            ));
            specs.push(TensorSpec::new(
                format!("{name}.bias"),
                vec![self.input_channels],
                TensorRole::Bias,
            ));
        }
        specs
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layout()
            .iter()
            .filter(|s| s.role.is_trainable())
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

fn push_bn(specs: &mut Vec<TensorSpec>, layer: &str, c: usize) {
    specs.push(TensorSpec::new(
        format!("{layer}.bn.weight"),
        vec![c],
        TensorRole::BnGamma,
    ));
    specs.push(TensorSpec::new(format!("{layer}.bn.bias"), vec![c], TensorRole::BnBeta));
    specs.push(TensorSpec::new(
        format!("{layer}.bn.running_mean"),
        vec![c],
        TensorRole::RunningMean,
    ));
    specs.push(TensorSpec::new(
        format!("{layer}.bn.running_var"),
        vec![c],
        TensorRole::RunningVar,
    ));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Convolution or transposed-convolution kernel; `fan_in` sets the
    /// He initialization scale.
    Weight {
        fan_in: usize,
    },
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

impl TensorSpec {
    fn new(name: String, shape: Vec<usize>, role: TensorRole) -> Self {
        TensorSpec { name, shape, role }
    }

    fn weight(name: &str, shape: [usize; 4], fan_in: usize) -> Self {
        TensorSpec::new(
            format!("{name}.weight"),
            shape.to_vec(),
            TensorRole::Weight { fan_in: fan_in.max(1) },
        )
    }
}

/// Learnable weights and batch-norm buffers of one network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    /// Initializes a network: He-normal kernels, zero biases, unit BN scale,
    /// zero BN shift, running statistics at (0, 1).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in config.layout() {
            let t = match spec.role {
                TensorRole::Weight { fan_in } => {
                    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
                    let len = spec.shape.iter().product();
                    let data = (0..len).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::new(spec.shape.clone(), data)?
                }
                TensorRole::Bias | TensorRole::BnBeta | TensorRole::RunningMean => Tensor::zeros(&spec.shape),
                TensorRole::BnGamma | TensorRole::RunningVar => Tensor::ones(&spec.shape),
            };
            tensors.insert(spec.name, t);
        }
        Ok(ModelParams { config, tensors })
    }

    /// Assembles parameters from named tensors, checking that they match the
    /// architecture exactly.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for spec in config.layout() {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, architecture expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            out.insert(spec.name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
        }
        Ok(ModelParams { config, tensors: out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.config.fingerprint()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }

    /// Wraps every tensor in a graph variable. Learnable tensors require
    /// gradients when `trainable` is set; running statistics never do.
    pub fn bind<T: Float>(&self, trainable: bool) -> BoundModel<T> {
        let mut vars = BTreeMap::new();
        let mut learnable = Vec::new();
        let mut weights = Vec::new();
        for spec in self.config.layout() {
            let t: Tensor<T> = self.tensors[&spec.name].cast();
            let var = Var::new(t, trainable && spec.role.is_trainable());
            if spec.role.is_trainable() {
                learnable.push((spec.name.clone(), var.clone()));
            }
            if matches!(spec.role, TensorRole::Weight { .. }) {
                weights.push(var.clone());
            }
            vars.insert(spec.name, var);
        }
        BoundModel {
            config: self.config.clone(),
            vars,
            learnable,
            weights,
        }
    }

    /// Runs the network on an `N x 1 x B x B` batch. Batch-norm running
    /// statistics touched in training mode belong to a temporary binding
    /// and are discarded; use [`BoundModel`] to keep them.
    pub fn forward(&self, batch: &Tensor<f32>, mode: BatchNormMode) -> Result<Tensor<f32>> {
        let bound = self.bind::<f32>(false);
        let out = bound.forward(&Var::constant(batch.clone()), mode)?;
        let v = out.value().clone();
        Ok(v)
    }
}

/// Parameters bound into graph variables for one training run or forward
/// pass.
pub struct BoundModel<T: Float> {
    config: ModelConfig,
    vars: BTreeMap<String, Var<T>>,
    learnable: Vec<(String, Var<T>)>,
    weights: Vec<Var<T>>,
}

impl<T: Float> BoundModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn var(&self, name: &str) -> &Var<T> {
        &self.vars[name]
    }

    /// Learnable variables in canonical order.
    pub fn learnable(&self) -> &[(String, Var<T>)] {
        &self.learnable
    }

    /// Convolution kernels, the set penalized by the weight regularizer.
    pub fn conv_weights(&self) -> &[Var<T>] {
        &self.weights
    }

    pub fn zero_grad(&self) {
        for (_, v) in &self.learnable {
            v.zero_grad();
        }
    }

    /// Copies the current values back into `f32` parameters.
    pub fn to_params(&self) -> ModelParams {
        let tensors = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.value().cast::<f32>()))
            .collect();
        ModelParams {
            config: self.config.clone(),
            tensors,
        }
    }

    fn conv(&self, x: &Var<T>, layer: &str, pad: usize) -> Result<Var<T>> {
        x.conv2d(
            self.var(&format!("{layer}.weight")),
            self.var(&format!("{layer}.bias")),
            1,
            pad,
        )
    }

    fn bn(&self, x: &Var<T>, layer: &str, mode: BatchNormMode) -> Result<Var<T>> {
        x.batch_norm2d(
            self.var(&format!("{layer}.bn.weight")),
            self.var(&format!("{layer}.bn.bias")),
            self.var(&format!("{layer}.bn.running_mean")),
            self.var(&format!("{layer}.bn.running_var")),
            mode,
            BN_EPS,
            BN_MOMENTUM,
        )
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let b = self.config.block_size;
        match x.shape()[..] {
            [n, c, h, w] if n > 0 && c == self.config.input_channels && h == b && w == b => Ok(()),
            _ => Err(Error::shape(
                "model",
                format!(
                    "expected an N x {} x {b} x {b} batch, got {:?}",
                    self.config.input_channels,
                    x.shape()
                ),
            )),
        }
    }

    /// Stems and encoder: `N x 1 x B x B` -> `N x C x B/8 x B/8`.
    pub fn encode(&self, x: &Var<T>, mode: BatchNormMode) -> Result<Var<T>> {
        self.check_input(x)?;
        let stems = STEM_KERNELS
            .iter()
            .map(|&k| self.conv(x, &format!("stem.k{k}"), k / 2))
            .collect::<Result<Vec<_>>>()?;
        let mut h = Var::concat_channels(&stems)?;
        for (i, &k) in ENCODER_KERNELS.iter().enumerate() {
            let name = format!("enc{}", i + 1);
            h = self.conv(&h, &format!("{name}.conv"), k / 2)?;
            h = self.bn(&h, &name, mode)?.relu()?;
            if i < 3 {
                h = h.max_pool2d()?;
            }
        }
        Ok(h)
    }

    /// Decoder and output heads: latent -> `N x 1 x B x B` in `[0, 1]`.
    pub fn decode(&self, z: &Var<T>, mode: BatchNormMode) -> Result<Var<T>> {
        let mut h = z.clone();
        for (i, &k) in [3usize, 5, 5, 5].iter().enumerate() {
            let name = format!("dec{}", i + 1);
            let (stride, out_pad) = if i == 0 { (1, 0) } else { (2, 1) };
            h = h.conv_transpose2d(
                self.var(&format!("{name}.deconv.weight")),
                self.var(&format!("{name}.deconv.bias")),
                stride,
                k / 2,
                out_pad,
            )?;
            h = self.bn(&h, &name, mode)?.relu()?;
        }
        let mut sum: Option<Var<T>> = None;
        for k in STEM_KERNELS {
            let name = format!("head.k{k}");
            let out = h.conv_transpose2d(
                self.var(&format!("{name}.weight")),
                self.var(&format!("{name}.bias")),
                1,
                k / 2,
                0,
            )?;
            sum = Some(match sum {
                Some(s) => s.add(&out)?,
                None => out,
            });
        }
        sum.expect("three heads")
            .scale(1.0 / STEM_KERNELS.len() as f64)?
            .sigmoid()
    }

    pub fn forward(&self, x: &Var<T>, mode: BatchNormMode) -> Result<Var<T>> {
        let z = self.encode(x, mode)?;
        self.decode(&z, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Shape arithmetic written out independently of `layout()`.
    fn closed_form_param_count(s: usize, e: [usize; 4]) -> usize {
        let stems = 3 * s + s * (1 + 9 + 25);
        let stem_width = 3 * s;
        let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co + 2 * co;
        let enc = conv(stem_width, e[0], 5) + conv(e[0], e[1], 5) + conv(e[1], e[2], 5) + conv(e[2], e[3], 3);
        let dec = conv(e[3], e[2], 3) + conv(e[2], e[1], 5) + conv(e[1], e[0], 5) + conv(e[0], stem_width, 5);
        let heads = stem_width * (1 + 9 + 25) + 3;
        stems + enc + dec + heads
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.parameter_count(), closed_form_param_count(8, [32, 32, 32, 64]));
        let small = ModelConfig {
            stem_channels: 2,
            encoder_channels: [3, 4, 5, 6],
            ..ModelConfig::default()
        };
        assert_eq!(small.parameter_count(), closed_form_param_count(2, [3, 4, 5, 6]));
        assert!(cfg.parameter_count() < 262_144);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = ModelParams::build(ModelConfig::default(), 7).unwrap();
        let b = ModelParams::build(ModelConfig::default(), 7).unwrap();
        let c = ModelParams::build(ModelConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_block_size_lists_allowed_values() {
        let err = ModelParams::build(ModelConfig::with_block_size(24), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[16, 32, 64]"), "{msg}");
    }

    #[test]
    fn initialization_roles() {
        let p = ModelParams::build(ModelConfig::default(), 1).unwrap();
        assert!(p.get("enc1.conv.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("enc1.bn.weight").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("enc1.bn.running_var").unwrap().data().iter().all(|&v| v == 1.0));
        let w = p.get("enc1.conv.weight").unwrap();
        let var = w.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / (24.0 * 25.0);
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn forward_preserves_shape_for_every_block_size() {
        for b in ALLOWED_BLOCK_SIZES {
            let cfg = ModelConfig::with_block_size(b);
            let p = ModelParams::build(cfg.clone(), 3).unwrap();
            let x = Tensor::full(&[2, 1, b, b], 0.5f32);
            for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
                let y = p.forward(&x, mode).unwrap();
                assert_eq!(y.shape(), &[2, 1, b, b]);
                assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let bound = p.bind::<f32>(false);
            let z = bound.encode(&Var::constant(x), BatchNormMode::Eval).unwrap();
            assert_eq!(z.shape(), vec![2, 64, b / 8, b / 8]);
        }
    }

    #[test]
    fn forward_rejects_wrong_block() {
        let p = ModelParams::build(ModelConfig::default(), 3).unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.5f32);
        assert!(p.forward(&x, BatchNormMode::Eval).is_err());
    }

    #[test]
    fn eval_forward_is_pure() {
        let p = ModelParams::build(ModelConfig::with_block_size(16), 3).unwrap();
        let data: Vec<f32> = (0..256).map(|i| (i % 7) as f32 / 7.0).collect();
        let x = Tensor::new(vec![1, 1, 16, 16], data).unwrap();
        let a = p.forward(&x, BatchNormMode::Eval).unwrap();
        let b = p.forward(&x, BatchNormMode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn from_tensors_rejects_missing_and_extra() {
        let p = ModelParams::build(ModelConfig::default(), 0).unwrap();
        let mut t = p.tensors().clone();
        t.remove("enc2.conv.bias");
        assert!(ModelParams::from_tensors(ModelConfig::default(), t).is_err());
        let mut t = p.tensors().clone();
        t.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(ModelParams::from_tensors(ModelConfig::default(), t).is_err());
    }

    #[test]
    fn fingerprint_depends_on_config() {
        let a = ModelConfig::default();
        let b = ModelConfig::with_block_size(64);
        assert_eq!(a.fingerprint(), ModelConfig::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
