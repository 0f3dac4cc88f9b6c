use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use renetd_core::data::{
    load_dataset, load_gray, random_blobs, save_gray_png, save_mask_png, synth_texture, synth_texture_with_noise,
    DatasetRole, ImageSample, Mask, TextureKind, TEXTURE_NOISE,
};
use renetd_core::detector::{self, write_artifacts, DetectorConfig};
use renetd_core::evaluator::{benchmark_timing, ImageMetrics, MetricsReport, PixelCounts};
use renetd_core::losses::{LossConfig, LossKind};
use renetd_core::model::{self, ModelConfig, ModelParams};
use renetd_core::trainer::{self, ablation_sweep, Optimizer, SweepAxis, TrainConfig, ALPHA_GRID, LOSS_GRID};
use renetd_core::Error;

use crate::config::{usage, Settings};

pub const WORKERS_ENV: &str = "RENETD_WORKERS";

#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    /// Patch side: 16, 32 or 64.
    #[arg(long)]
    block: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[command(flatten)]
    model: ModelFlags,
    /// l1, mse, ssim, mse+ssim, l1+ssim or ms_ssim.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Pixel-term weight of the blended losses; 1.0 gives pure L1/MSE.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight-norm penalty coefficient.
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    ssim_window: Option<usize>,
    #[arg(long)]
    ms_scales: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    patches_per_epoch: Option<usize>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    seed: Option<u64>,
    /// Log the loss every N iterations (0 disables).
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct DetectorFlags {
    /// Threshold is mean + k * std of the filtered residual.
    #[arg(long)]
    k: Option<f64>,
    /// Odd side of the residual mean filter.
    #[arg(long)]
    kernel: Option<usize>,
    /// Smallest region kept, in pixels.
    #[arg(long)]
    min_area: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Folder of defect-free training images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Image file or folder of images.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Folder for heatmaps, masks and region lists.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model_flags: ModelFlags,
    #[command(flatten)]
    detector: DetectorFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Folder of test images with `<name>_mask.png` ground truth.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint used to produce predictions.
    #[arg(long, conflicts_with = "predictions")]
    model: Option<PathBuf>,
    /// Folder of precomputed `<name>_mask.png` predictions.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Folder for metrics.json and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    detector: DetectorFlags,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Folder of defect-free training images.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Folder of test images with ground-truth masks.
    #[arg(long)]
    test: Option<PathBuf>,
    /// alpha or loss.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated axis values; defaults to the standard grid.
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    base: TrainFlags,
    #[command(flatten)]
    detector: DetectorFlags,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// stripes, checker or blended_noise.
    #[arg(long)]
    kind: Option<TextureKind>,
    /// Side of the square images.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Blob defects per image.
    #[arg(long)]
    defects: Option<usize>,
    #[arg(long)]
    defect_min: Option<usize>,
    #[arg(long)]
    defect_max: Option<usize>,
    /// Intensity change of each blob.
    #[arg(long)]
    defect_delta: Option<f32>,
    /// Amplitude of the uniform pixel noise.
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write `<name>_mask.png` next to each image.
    #[arg(long)]
    masks: Option<bool>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Checkpoint; a freshly initialised model is used when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Image to time; a synthetic stripes image is used when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Side of the synthetic image.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model_flags: ModelFlags,
    #[command(flatten)]
    detector: DetectorFlags,
}

fn model_config(s: &mut Settings, f: &ModelFlags) -> Result<ModelConfig> {
    let block = s.get("block", f.block, ModelConfig::default().block_size)?;
    let cfg = ModelConfig::with_block_size(block);
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &mut Settings, f: &TrainFlags) -> Result<(ModelConfig, TrainConfig)> {
    let model_cfg = model_config(s, &f.model)?;
    let d = TrainConfig::default();
    let dl = LossConfig::default();
    let loss = LossConfig {
        kind: s.get("loss", f.loss, dl.kind)?,
        alpha: s.get("alpha", f.alpha, dl.alpha)?,
        lambda_reg: s.get("lambda_reg", f.lambda_reg, dl.lambda_reg)?,
        ssim_window: s.get("ssim_window", f.ssim_window, dl.ssim_window)?,
        ms_scales: s.get("ms_scales", f.ms_scales, dl.ms_scales)?,
        ..dl
    };
    let cfg = TrainConfig {
        loss,
        iterations: s.get("iterations", f.iterations, d.iterations)?,
        patches_per_epoch: s.get("patches_per_epoch", f.patches_per_epoch, d.patches_per_epoch)?,
        minibatch: s.get("minibatch", f.minibatch, d.minibatch)?,
        learning_rate: s.get("learning_rate", f.learning_rate, d.learning_rate)?,
        optimizer: s.get("optimizer", f.optimizer, d.optimizer)?,
        seed: s.get("seed", f.seed, d.seed)?,
        log_every: s.get("log_every", f.log_every, d.log_every)?,
        checkpoint_path: None,
    };
    cfg.validate(&model_cfg)?;
    Ok((model_cfg, cfg))
}

fn detector_config(s: &mut Settings, f: &DetectorFlags) -> Result<DetectorConfig> {
    let d = DetectorConfig::default();
    let cfg = DetectorConfig {
        k: s.get("k", f.k, d.k)?,
        filter_kernel: s.get("kernel", f.kernel, d.filter_kernel)?,
        min_area: s.get("min_area", f.min_area, d.min_area)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Worker pool sized by `RENETD_WORKERS` (or the `workers` config key).
fn worker_pool(s: &mut Settings) -> Result<rayon::ThreadPool> {
    let env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|e| usage(format!("{WORKERS_ENV}='{v}': {e}")))?,
        ),
        Err(_) => None,
    };
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let workers = s.get("workers", env, default)?;
    if workers == 0 {
        return Err(usage("worker count must be at least 1"));
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams> {
    require_file(path, "checkpoint")?;
    let params = match expected {
        Some(cfg) => model::load_expecting(path, cfg),
        None => model::load(path),
    };
    params.with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_test_set(dir: &Path) -> Result<Vec<ImageSample>> {
    require_dir(dir, "test data")?;
    let set = load_dataset(dir, DatasetRole::Test)?;
    if let Some(s) = set.samples.iter().find(|s| s.mask.is_none()) {
        return Err(Error::Dataset(format!("{} has no ground-truth mask", s.path.display())).into());
    }
    Ok(set.samples)
}

pub fn train(a: TrainArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let data = s.path("data", a.data)?;
    let out = s.path("out", a.out)?;
    let (model_cfg, mut cfg) = train_config(&mut s, &a.train)?;
    s.finish()?;
    require_dir(&data, "training data")?;
    s.echo("train", &parent_dir(&out))?;

    let set = load_dataset(&data, DatasetRole::Train)?;
    println!(
        "training on {} images ({} skipped)",
        set.samples.len(),
        set.skipped.len()
    );
    cfg.checkpoint_path = Some(out.clone());
    let t = Instant::now();
    let (params, report) = match trainer::train(&model_cfg, &cfg, &set.samples) {
        Ok(r) => r,
        Err(Error::Diverged {
            iteration,
            loss,
            last_good,
        }) => {
            let mut fallback = out.clone().into_os_string();
            fallback.push(".last_good");
            model::save(&last_good, &fallback)?;
            eprintln!("last good parameters saved to {}", PathBuf::from(&fallback).display());
            return Err(Error::Diverged {
                iteration,
                loss,
                last_good,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let csv = out.with_file_name(format!("{}_loss.csv", file_stem(&out)));
    std::fs::write(&csv, report.loss_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let bytes = std::fs::metadata(&out)?.len();
    println!("final loss {:.6}", report.final_loss());
    println!("parameters {} ({} bytes on disk)", params.parameter_count(), bytes);
    println!("checkpoint {}", out.display());
    println!("loss curve {}", csv.display());
    println!("elapsed {:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}

fn collect_inputs(input: &Path) -> Result<Vec<ImageSample>> {
    if input.is_dir() {
        Ok(load_dataset(input, DatasetRole::Test)?.samples)
    } else {
        require_file(input, "input")?;
        Ok(vec![ImageSample::new(load_gray(input)?, input)])
    }
}

pub fn detect(a: DetectArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let model_path = s.path("model", a.model)?;
    let input = s.path("input", a.input)?;
    let out = s.path("out", a.out)?;
    let block = s.optional("block", a.model_flags.block)?;
    let det = detector_config(&mut s, &a.detector)?;
    let pool = worker_pool(&mut s)?;
    s.finish()?;
    let expected = block.map(ModelConfig::with_block_size);
    let params = load_model(&model_path, expected.as_ref())?;
    let images = collect_inputs(&input)?;
    s.echo("detect", &out)?;

    let lines: Vec<String> = pool.install(|| {
        images
            .par_iter()
            .map(|img| -> Result<String> {
                let stem = img.stem();
                let result = detector::detect(&params, &img.pixels, &det)?;
                write_artifacts(&result, &out, &stem)?;
                let peak = result.regions.iter().map(|r| r.peak).fold(0.0f32, f32::max);
                Ok(format!(
                    "{stem}: {} region(s), {} defect pixel(s), peak {peak:.4}, {:.1} ms",
                    result.regions.len(),
                    result.mask.count(),
                    result.timings.total_ms()
                ))
            })
            .collect::<Result<_>>()
    })?;
    for l in lines {
        println!("{l}");
    }
    Ok(())
}

fn load_prediction(dir: &Path, sample: &ImageSample) -> Result<Mask> {
    let path = dir.join(format!("{}_mask.png", sample.stem()));
    if !path.is_file() {
        return Err(Error::Dataset(format!("missing prediction {}", path.display())).into());
    }
    let gray = load_gray(&path)?;
    if !gray.same_dims(&sample.pixels) {
        return Err(Error::Dataset(format!(
            "prediction {} is {}x{} but its image is {}x{}",
            path.display(),
            gray.width(),
            gray.height(),
            sample.width(),
            sample.height()
        ))
        .into());
    }
    Ok(Mask::from_vec(
        gray.width(),
        gray.height(),
        gray.data().iter().map(|&v| v > 0.5).collect(),
    )?)
}

pub fn eval(a: EvalArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let data = s.path("data", a.data)?;
    let model_path = s.optional_path("model", a.model)?;
    let predictions = s.optional_path("predictions", a.predictions)?;
    let out = s.path("out", a.out)?;
    let det = detector_config(&mut s, &a.detector)?;
    let pool = worker_pool(&mut s)?;
    s.finish()?;
    let params = match (&model_path, &predictions) {
        (Some(m), None) => Some(load_model(m, None)?),
        (None, Some(p)) => {
            require_dir(p, "predictions")?;
            None
        }
        _ => return Err(usage("eval needs exactly one of --model or --predictions")),
    };
    let samples = load_test_set(&data)?;
    s.echo("eval", &out)?;

    let rows: Vec<ImageMetrics> = pool.install(|| {
        samples
            .par_iter()
            .map(|sample| -> Result<ImageMetrics> {
                let gt = sample.mask.as_ref().expect("checked by load_test_set");
                let t = Instant::now();
                let (pred, detect_ms) = match (&params, &predictions) {
                    (Some(p), _) => (
                        detector::detect(p, &sample.pixels, &det)?.mask,
                        t.elapsed().as_secs_f64() * 1e3,
                    ),
                    (None, Some(dir)) => (load_prediction(dir, sample)?, 0.0),
                    (None, None) => unreachable!(),
                };
                let counts = PixelCounts::count(&pred, gt)?;
                Ok(ImageMetrics {
                    name: sample.stem(),
                    counts,
                    scores: counts.scores(),
                    detect_ms,
                })
            })
            .collect::<Result<_>>()
    })?;
    let report = MetricsReport::from_images(rows);
    std::fs::write(out.join("metrics.json"), report.to_json())?;
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;
    println!("images {}", report.per_image.len());
    println!("recall {:.6}", report.recall());
    println!("precision {:.6}", report.precision());
    println!("f1 {:.6}", report.f1());
    if let Some(c) = report.scores.convention {
        println!("note: {c}");
    }
    Ok(())
}

fn parse_axis(axis: &str, values: Option<&str>) -> Result<SweepAxis> {
    let items = |v: &str| {
        v.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect::<Vec<_>>()
    };
    match axis {
        "alpha" => Ok(SweepAxis::Alpha(match values {
            None => ALPHA_GRID.to_vec(),
            Some(v) => items(v)
                .iter()
                .map(|t| t.parse::<f64>().map_err(|e| usage(format!("alpha value '{t}': {e}"))))
                .collect::<Result<_>>()?,
        })),
        "loss" => Ok(SweepAxis::LossKind(match values {
            None => LOSS_GRID.to_vec(),
            Some(v) => items(v)
                .iter()
                .map(|t| t.parse::<LossKind>())
                .collect::<Result<_, _>>()?,
        })),
        other => Err(usage(format!("unknown sweep axis '{other}' (expected alpha or loss)"))),
    }
}

fn axis_values(axis: &SweepAxis) -> String {
    match axis {
        SweepAxis::Alpha(v) => v.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        SweepAxis::LossKind(v) => v.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
    }
}

pub fn sweep(a: SweepArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let train_dir = s.path("train", a.train)?;
    let test_dir = s.path("test", a.test)?;
    let out = s.path("out", a.out)?;
    let axis_name: String = s.get("axis", a.axis, "alpha".to_owned())?;
    let values: Option<String> = s.optional("values", a.values)?;
    let axis = parse_axis(&axis_name, values.as_deref())?;
    s.get("values", Some(axis_values(&axis)), String::new())?;
    let (model_cfg, base) = train_config(&mut s, &a.base)?;
    let det = detector_config(&mut s, &a.detector)?;
    s.finish()?;
    require_dir(&train_dir, "training data")?;
    let train_set = load_dataset(&train_dir, DatasetRole::Train)?.samples;
    let test_set = load_test_set(&test_dir)?;
    s.echo("sweep", &out)?;

    let table = ablation_sweep(&model_cfg, &base, &train_set, &test_set, &det, &axis)?;
    let path = out.join(format!("sweep_{}.csv", table.axis));
    std::fs::write(&path, table.to_csv())?;
    let mut summary = String::new();
    for c in &table.cells {
        let _ = writeln!(
            summary,
            "{} = {}: f1 {:.4}, final loss {:.6}",
            table.axis,
            c.label,
            c.metrics.f1(),
            c.report.final_loss()
        );
    }
    print!("{summary}");
    println!("table {}", path.display());
    Ok(())
}

pub fn synth(a: SynthArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let out = s.path("out", a.out)?;
    let kind = s.get("kind", a.kind, TextureKind::Stripes)?;
    let size = s.get("size", a.size, 512usize)?;
    let count = s.get("count", a.count, 1usize)?;
    let defects = s.get("defects", a.defects, 0usize)?;
    let dmin = s.get("defect_min", a.defect_min, 12usize)?;
    let dmax = s.get("defect_max", a.defect_max, 24usize)?;
    let delta = s.get("defect_delta", a.defect_delta, 0.35f32)?;
    let noise = s.get("noise", a.noise, TEXTURE_NOISE)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let masks = s.get("masks", a.masks, true)?;
    s.finish()?;
    if size == 0 || count == 0 {
        return Err(usage("size and count must be positive"));
    }
    if defects > 0 {
        // Fail fast on blob sizes that cannot fit.
        random_blobs(size, size, 1, dmin, dmax, delta, seed)?;
    }
    s.echo("synth", &out)?;

    for i in 0..count {
        let image_seed = seed.wrapping_add(i as u64);
        let blobs = if defects > 0 {
            random_blobs(
                size,
                size,
                defects,
                dmin,
                dmax,
                delta,
                image_seed ^ 0x9e37_79b9_7f4a_7c15,
            )?
        } else {
            Vec::new()
        };
        let (sample, mask) = synth_texture_with_noise(kind, size, size, &blobs, image_seed, noise)?;
        let name = format!("{kind}_{i:03}");
        save_gray_png(&sample.pixels, out.join(format!("{name}.png")))?;
        if masks {
            save_mask_png(&mask, out.join(format!("{name}_mask.png")))?;
        }
        println!("{name}: {} defect pixel(s)", mask.count());
    }
    Ok(())
}

pub fn bench(a: BenchArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config)?;
    let model_path = s.optional_path("model", a.model)?;
    let input = s.optional_path("input", a.input)?;
    let size = s.get("size", a.size, 1024usize)?;
    let runs = s.get("runs", a.runs, 20usize)?;
    let out = s.optional_path("out", a.out)?;
    let model_cfg = model_config(&mut s, &a.model_flags)?;
    let det = detector_config(&mut s, &a.detector)?;
    s.finish()?;
    if runs == 0 {
        return Err(usage("runs must be at least 1"));
    }
    let params = match &model_path {
        Some(p) => load_model(p, a.model_flags.block.map(|_| &model_cfg))?,
        None => ModelParams::build(model_cfg, 0)?,
    };
    let image = match &input {
        Some(p) => {
            require_file(p, "input")?;
            load_gray(p)?
        }
        None => synth_texture(TextureKind::Stripes, size, size, &[], 0)?.0.pixels,
    };
    match &out {
        Some(p) => s.echo("bench", &parent_dir(p))?,
        None => {
            println!("# effective config (bench)");
            print!("{}", s.render());
        }
    }

    let report = benchmark_timing(&params, &image, &det, runs)?;
    let json = report.to_json();
    if let Some(p) = &out {
        std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{json}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        assert_eq!(
            parse_axis("alpha", None).unwrap(),
            SweepAxis::Alpha(ALPHA_GRID.to_vec())
        );
        assert_eq!(
            parse_axis("alpha", Some("0, 0.5,1")).unwrap(),
            SweepAxis::Alpha(vec![0.0, 0.5, 1.0])
        );
        assert_eq!(
            parse_axis("loss", Some("l1,mse")).unwrap(),
            SweepAxis::LossKind(vec![LossKind::L1, LossKind::Mse])
        );
        assert!(parse_axis("beta", None).is_err());
        assert!(parse_axis("alpha", Some("x")).is_err());
        assert_eq!(
            axis_values(&parse_axis("loss", None).unwrap()),
            "l1,mse,mse+ssim,l1+ssim,ssim"
        );
    }

    #[test]
    fn defaults_round_trip_through_settings() {
        let mut s = Settings::load(None).unwrap();
        let (m, t) = train_config(&mut s, &TrainFlags::default()).unwrap();
        assert_eq!(m, ModelConfig::default());
        assert_eq!(t, TrainConfig::default());
        let text = s.render();
        assert!(text.contains("alpha = 0.15\n"));
        assert!(text.contains("block = 32\n"));
        assert!(text.contains("loss = l1+ssim\n"));
    }
}
