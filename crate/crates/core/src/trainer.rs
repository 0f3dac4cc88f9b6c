//! Training loop, optimizers and ablation sweeps.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{sample_patches, ImageSample};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_dataset, MetricsReport};
use crate::losses::{objective, LossConfig, LossKind};
use crate::model::{self, BoundModel, ModelConfig, ModelParams};
use crate::tensor::{BatchNormMode, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (expected adam or sgd)"
            ))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub iterations: usize,
    /// Patches drawn afresh at the start of every epoch.
    pub patches_per_epoch: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Log the loss every this many iterations, 0 disables.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            iterations: 1000,
            patches_per_epoch: 256,
            minibatch: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            checkpoint_path: None,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        self.loss.validate_for_block(model.block_size)?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.patches_per_epoch == 0 || self.minibatch == 0 {
            return Err(Error::Config("patches_per_epoch and minibatch must be positive".into()));
        }
        if self.minibatch > self.patches_per_epoch {
            return Err(Error::Config(format!(
                "minibatch {} exceeds patches_per_epoch {}",
                self.minibatch, self.patches_per_epoch
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    fn batches_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.minibatch)
    }
}

/// Accumulated wall-clock milliseconds per training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub sampling_ms: f64,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub update_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss of every iteration, in order.
    pub losses: Vec<f64>,
    pub timings: PhaseTimings,
    pub checkpoint: Option<PathBuf>,
    pub parameter_count: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Trailing moving average; entry `i` averages losses `i+1-window ..= i`.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        moving_average(&self.losses, window)
    }

    /// `iteration,loss` with 1-based iterations.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{},{l}", i + 1);
        }
        out
    }
}

pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut acc: f64 = values[..window].iter().sum();
    let mut out = vec![acc / window as f64];
    for i in window..values.len() {
        acc += values[i] - values[i - window];
        out.push(acc / window as f64);
    }
    out
}

enum OptState {
    Adam {
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
        step: i32,
    },
    Sgd,
}

impl OptState {
    fn new(kind: Optimizer, model: &BoundModel<f32>) -> Self {
        match kind {
            Optimizer::Adam => {
                let zeros: Vec<Vec<f32>> = model
                    .learnable()
                    .iter()
                    .map(|(_, v)| vec![0.0; v.value().len()])
                    .collect();
                OptState::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    step: 0,
                }
            }
            Optimizer::Sgd => OptState::Sgd,
        }
    }

    fn step(&mut self, model: &BoundModel<f32>, lr: f64) {
        match self {
            OptState::Adam { m, v, step } => {
                *step += 1;
                let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
                let c1 = 1.0 - b1.powi(*step);
                let c2 = 1.0 - b2.powi(*step);
                let (lr, eps) = (lr as f32, ADAM_EPS as f32);
                for (i, (_, var)) in model.learnable().iter().enumerate() {
                    let Some(g) = var.grad() else { continue };
                    let (m, v) = (&mut m[i], &mut v[i]);
                    var.update(|t| {
                        for (((w, &g), m), v) in t
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(m.iter_mut())
                            .zip(v.iter_mut())
                        {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        }
                    });
                }
            }
            OptState::Sgd => {
                for (_, var) in model.learnable() {
                    let Some(g) = var.grad() else { continue };
                    var.update(|t| {
                        for (w, &g) in t.data_mut().iter_mut().zip(g.data()) {
                            *w -= lr as f32 * g;
                        }
                    });
                }
            }
        }
    }
}

fn grads_finite(model: &BoundModel<f32>) -> bool {
    model
        .learnable()
        .iter()
        .all(|(_, v)| v.with_grad(|g| g.is_none_or(|g| g.all_finite())))
}

/// Trains a freshly initialized network on patches of `dataset`.
///
/// On a non-finite loss or gradient the run stops with
/// [`Error::Diverged`], carrying the parameters from before the failing
/// step.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[ImageSample],
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate(model_cfg)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let init = ModelParams::build(model_cfg.clone(), cfg.seed)?;
    let model = init.bind::<f32>(true);
    let mut opt = OptState::new(cfg.optimizer, &model);
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let block = model_cfg.block_size;
    let per_epoch = cfg.batches_per_epoch();

    let mut timings = PhaseTimings::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut epoch = None;
    for it in 0..cfg.iterations {
        let t = Instant::now();
        if it % per_epoch == 0 {
            epoch = Some(sample_patches(dataset, block, cfg.patches_per_epoch, seeds.gen())?);
        }
        let slot = it % per_epoch;
        let batch = epoch
            .as_ref()
            .expect("sampled at epoch start")
            .slice(slot * cfg.minibatch..((slot + 1) * cfg.minibatch).min(cfg.patches_per_epoch));
        timings.sampling_ms += t.elapsed().as_secs_f64() * 1e3;

        let last_good = model.to_params();
        let diverged = |loss: f64, last_good: ModelParams| Error::Diverged {
            iteration: it,
            loss,
            last_good: Box::new(last_good),
        };
        let recover = |e: Error, last_good: &ModelParams| match e {
            Error::NonFinite { .. } => diverged(f64::NAN, last_good.clone()),
            other => other,
        };

        let t = Instant::now();
        model.zero_grad();
        let x = Var::constant(batch.tensor);
        let loss = model
            .forward(&x, BatchNormMode::Train)
            .and_then(|y| objective(&x, &y, model.conv_weights(), &cfg.loss))
            .map_err(|e| recover(e, &last_good))?;
        let value = loss.item() as f64;
        timings.forward_ms += t.elapsed().as_secs_f64() * 1e3;
        if !value.is_finite() {
            return Err(diverged(value, last_good));
        }

        let t = Instant::now();
        loss.backward().map_err(|e| recover(e, &last_good))?;
        timings.backward_ms += t.elapsed().as_secs_f64() * 1e3;
        if !grads_finite(&model) {
            return Err(diverged(value, last_good));
        }

        let t = Instant::now();
        opt.step(&model, cfg.learning_rate);
        timings.update_ms += t.elapsed().as_secs_f64() * 1e3;

        losses.push(value);
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            log::info!("iteration {}/{}: loss {value:.6}", it + 1, cfg.iterations);
        }
    }

    let params = model.to_params();
    if let Some(path) = &cfg.checkpoint_path {
        model::save(&params, path)?;
    }
    let report = TrainReport {
        losses,
        timings,
        checkpoint: cfg.checkpoint_path.clone(),
        parameter_count: params.parameter_count(),
    };
    Ok((params, report))
}

/// Weight grid of the alpha ablation.
pub const ALPHA_GRID: [f64; 10] = [0.0, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 1.0];
/// Loss kinds compared in the loss ablation.
pub const LOSS_GRID: [LossKind; 5] = [
    LossKind::L1,
    LossKind::Mse,
    LossKind::MseSsim,
    LossKind::L1Ssim,
    LossKind::Ssim,
];

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    LossKind(Vec<LossKind>),
    /// Pixel-term weight of a blended loss; a non-blended base kind is
    /// replaced by L1+SSIM.
    Alpha(Vec<f64>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::LossKind(v) => v.len(),
            SweepAxis::Alpha(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::LossKind(_) => "loss",
            SweepAxis::Alpha(_) => "alpha",
        }
    }

    fn cells(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let mut out = Vec::new();
        match self {
            SweepAxis::LossKind(kinds) => {
                for &k in kinds {
                    let mut cfg = base.clone();
                    cfg.loss.kind = k;
                    out.push((k.to_string(), cfg));
                }
            }
            SweepAxis::Alpha(alphas) => {
                for &a in alphas {
                    let mut cfg = base.clone();
                    if !matches!(cfg.loss.kind, LossKind::L1Ssim | LossKind::MseSsim) {
                        cfg.loss.kind = LossKind::L1Ssim;
                    }
                    cfg.loss.alpha = a;
                    out.push((format!("{a}"), cfg));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub report: TrainReport,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: &'static str,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// Metrics as rows, swept values as columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for c in &self.cells {
            let _ = write!(out, ",{}", c.label);
        }
        out.push('\n');
        type Column = (&'static str, fn(&SweepCell) -> f64);
        let rows: [Column; 4] = [
            ("recall", |c| c.metrics.recall()),
            ("precision", |c| c.metrics.precision()),
            ("f1", |c| c.metrics.f1()),
            ("final_loss", |c| c.report.final_loss()),
        ];
        for (name, f) in rows {
            out.push_str(name);
            for c in &self.cells {
                let _ = write!(out, ",{:.6}", f(c));
            }
            out.push('\n');
        }
        out
    }
}

/// One training and evaluation run per value on `axis`.
pub fn ablation_sweep(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    train_set: &[ImageSample],
    test_set: &[ImageSample],
    detector: &DetectorConfig,
    axis: &SweepAxis,
) -> Result<SweepTable> {
    if axis.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cells = axis.cells(base);
    for (_, cfg) in &cells {
        cfg.validate(model_cfg)?;
    }
    let mut out = Vec::with_capacity(cells.len());
    for (label, mut cfg) in cells {
        cfg.checkpoint_path = None;
        log::info!("sweep {} = {label}", axis.name());
        let (params, report) = train(model_cfg, &cfg, train_set)?;
        let metrics = evaluate_dataset(&params, test_set, detector)?;
        out.push(SweepCell { label, report, metrics });
    }
    Ok(SweepTable {
        axis: axis.name(),
        cells: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_texture, TextureKind};

    fn tiny() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig::with_block_size(16);
        let cfg = TrainConfig {
            iterations: 3,
            patches_per_epoch: 4,
            minibatch: 2,
            loss: LossConfig {
                ssim_window: 7,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        (model, cfg)
    }

    fn images() -> Vec<ImageSample> {
        (0..2)
            .map(|s| synth_texture(TextureKind::Stripes, 24, 24, &[], s).unwrap().0)
            .collect()
    }

    #[test]
    fn defaults() {
        let d = TrainConfig::default();
        assert_eq!((d.iterations, d.patches_per_epoch, d.minibatch), (1000, 256, 32));
        assert_eq!(d.loss.alpha, 0.15);
        assert_eq!(d.learning_rate, 1e-3);
        assert_eq!(d.optimizer, Optimizer::Adam);
    }

    #[test]
    fn validation() {
        let (model, cfg) = tiny();
        assert!(cfg.validate(&model).is_ok());
        let bad = TrainConfig {
            minibatch: 5,
            ..cfg.clone()
        };
        assert!(matches!(bad.validate(&model), Err(Error::Config(_))));
        let bad = TrainConfig {
            iterations: 0,
            ..cfg.clone()
        };
        assert!(bad.validate(&model).is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..cfg.clone()
        };
        assert!(bad.validate(&model).is_err());
        assert!(matches!(train(&model, &cfg, &[]), Err(Error::Dataset(_))));
    }

    #[test]
    fn same_seed_same_run() {
        let (model, cfg) = tiny();
        let data = images();
        let before = data.clone();
        let (pa, ra) = train(&model, &cfg, &data).unwrap();
        let (pb, rb) = train(&model, &cfg, &data).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(pa, pb);
        assert_eq!(ra.losses.len(), 3);
        assert_eq!(data, before);
        assert_ne!(pa, ModelParams::build(model, cfg.seed).unwrap());
    }

    #[test]
    fn sgd_runs() {
        let (model, mut cfg) = tiny();
        cfg.optimizer = Optimizer::Sgd;
        let (_, r) = train(&model, &cfg, &images()).unwrap();
        assert!(r.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn nan_input_diverges_with_initial_params() {
        let (model, cfg) = tiny();
        let mut data = images();
        for img in &mut data {
            img.pixels.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
        }
        match train(&model, &cfg, &data) {
            Err(Error::Diverged {
                iteration, last_good, ..
            }) => {
                assert_eq!(iteration, 0);
                assert_eq!(*last_good, ModelParams::build(model, cfg.seed).unwrap());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_is_written() {
        let (model, mut cfg) = tiny();
        let dir = tempfile::tempdir().unwrap();
        cfg.checkpoint_path = Some(dir.path().join("m.rndc"));
        let (p, r) = train(&model, &cfg, &images()).unwrap();
        assert_eq!(crate::model::load(r.checkpoint.unwrap()).unwrap(), p);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), [1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn loss_csv_shape() {
        let r = TrainReport {
            losses: vec![0.5, 0.25],
            timings: PhaseTimings::default(),
            checkpoint: None,
            parameter_count: 0,
        };
        assert_eq!(r.loss_csv(), "iteration,loss\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn sweep_grids() {
        assert_eq!(ALPHA_GRID.len(), 10);
        assert_eq!(ALPHA_GRID[1], 0.15);
        let base = TrainConfig {
            loss: LossConfig {
                kind: LossKind::Mse,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        let cells = SweepAxis::Alpha(vec![0.0, 1.0]).cells(&base);
        assert!(cells.iter().all(|(_, c)| c.loss.kind == LossKind::L1Ssim));
        assert_eq!(cells[1].1.loss.alpha, 1.0);
    }

    #[test]
    fn single_value_sweep() {
        let (model, cfg) = tiny();
        let (mut test, mask) = synth_texture(TextureKind::Stripes, 24, 24, &[], 9).unwrap();
        test.mask = Some(mask);
        let table = ablation_sweep(
            &model,
            &cfg,
            &images(),
            &[test],
            &DetectorConfig::default(),
            &SweepAxis::LossKind(vec![LossKind::L1]),
        )
        .unwrap();
        assert_eq!(table.cells.len(), 1);
        let (_, direct) = train(
            &model,
            &TrainConfig {
                loss: LossConfig {
                    kind: LossKind::L1,
                    ..cfg.loss.clone()
                },
                ..cfg.clone()
            },
            &images(),
        )
        .unwrap();
        assert_eq!(table.cells[0].report.losses, direct.losses);
        let csv = table.to_csv();
        assert!(csv.starts_with("metric,l1\nrecall,"));
        assert_eq!(csv.lines().count(), 5);
        assert!(ablation_sweep(
            &model,
            &cfg,
            &images(),
            &[],
            &DetectorConfig::default(),
            &SweepAxis::Alpha(vec![])
        )
        .is_err());
    }
}
