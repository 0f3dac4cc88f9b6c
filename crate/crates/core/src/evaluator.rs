//! Pixel-level recall, precision and F1, and detection timing.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::data::{GrayMap, ImageSample, Mask};
use crate::detector::{detect, DetectorConfig, StageTimings};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Harmonic mean of precision and recall, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Ratios derived from counts, with the rule used when a set is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub convention: Option<&'static str>,
}

impl PixelCounts {
    pub fn count(pred: &Mask, gt: &Mask) -> Result<Self> {
        if !pred.same_dims(gt) {
            return Err(Error::shape(
                "pixel_metrics",
                format!("prediction is {:?} but ground truth is {:?}", pred.dims(), gt.dims()),
            ));
        }
        let mut c = PixelCounts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn scores(&self) -> Scores {
        let predicted = self.tp + self.fp;
        let actual = self.tp + self.fn_;
        match (predicted, actual) {
            (0, 0) => Scores {
                recall: 1.0,
                precision: 1.0,
                f1: 1.0,
                convention: Some("no defect predicted or present"),
            },
            (_, 0) => Scores {
                recall: 1.0,
                precision: 0.0,
                f1: 0.0,
                convention: Some("no defect present, recall defined as 1"),
            },
            (0, _) => Scores {
                recall: 0.0,
                precision: 1.0,
                f1: 0.0,
                convention: Some("no defect predicted, precision defined as 1"),
            },
            _ => {
                let recall = self.tp as f64 / actual as f64;
                let precision = self.tp as f64 / predicted as f64;
                Scores {
                    recall,
                    precision,
                    f1: f1_score(precision, recall),
                    convention: None,
                }
            }
        }
    }
}

impl std::ops::AddAssign for PixelCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(flatten)]
    pub counts: PixelCounts,
    #[serde(flatten)]
    pub scores: Scores,
    pub detect_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub counts: PixelCounts,
    #[serde(flatten)]
    pub scores: Scores,
    pub per_image: Vec<ImageMetrics>,
    pub mean_detect_ms: f64,
}

impl MetricsReport {
    pub fn recall(&self) -> f64 {
        self.scores.recall
    }

    pub fn precision(&self) -> f64 {
        self.scores.precision
    }

    pub fn f1(&self) -> f64 {
        self.scores.f1
    }

    /// Micro average: counts are summed before ratios are taken.
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let mut counts = PixelCounts::default();
        for m in &per_image {
            counts += m.counts;
        }
        let mean_detect_ms = if per_image.is_empty() {
            0.0
        } else {
            per_image.iter().map(|m| m.detect_ms).sum::<f64>() / per_image.len() as f64
        };
        MetricsReport {
            counts,
            scores: counts.scores(),
            per_image,
            mean_detect_ms,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// One row per image followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,tp,fp,fn,recall,precision,f1,detect_ms\n");
        let mut row = |name: &str, c: &PixelCounts, s: &Scores, ms: f64| {
            let _ = writeln!(
                out,
                "{name},{},{},{},{:.6},{:.6},{:.6},{ms:.3}",
                c.tp, c.fp, c.fn_, s.recall, s.precision, s.f1
            );
        };
        for m in &self.per_image {
            row(&m.name, &m.counts, &m.scores, m.detect_ms);
        }
        row("total", &self.counts, &self.scores, self.mean_detect_ms);
        out
    }
}

/// Counts and ratios for one prediction against its ground truth.
pub fn pixel_metrics(pred: &Mask, gt: &Mask) -> Result<MetricsReport> {
    let counts = PixelCounts::count(pred, gt)?;
    Ok(MetricsReport::from_images(vec![ImageMetrics {
        name: "image".into(),
        counts,
        scores: counts.scores(),
        detect_ms: 0.0,
    }]))
}

/// Runs detection on every sample and micro-averages the pixel counts.
pub fn evaluate_dataset(params: &ModelParams, test_set: &[ImageSample], cfg: &DetectorConfig) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(test_set.len());
    for sample in test_set {
        let gt = sample
            .mask
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("{} has no ground-truth mask", sample.path.display())))?;
        let t = Instant::now();
        let result = detect(params, &sample.pixels, cfg)?;
        let detect_ms = t.elapsed().as_secs_f64() * 1e3;
        let counts = PixelCounts::count(&result.mask, gt)?;
        rows.push(ImageMetrics {
            name: sample.stem(),
            counts,
            scores: counts.scores(),
            detect_ms,
        });
    }
    Ok(MetricsReport::from_images(rows))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub width: usize,
    pub height: usize,
    pub runs: usize,
    /// Per-stage medians.
    pub stages: StageTimings,
    /// Median of per-run totals.
    pub total_ms: f64,
    pub hardware: String,
}

impl BenchmarkReport {
    pub fn stage_sum_ms(&self) -> f64 {
        self.stages.total_ms()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("benchmark serializes")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// CPU model and core count as reported by the OS.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_owned())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_owned());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}, {threads} hardware threads")
}

/// Median stage timings over `runs` detections after one warm-up run.
pub fn benchmark_timing(
    params: &ModelParams,
    image: &GrayMap,
    cfg: &DetectorConfig,
    runs: usize,
) -> Result<BenchmarkReport> {
    if runs == 0 {
        return Err(Error::Config("benchmark needs at least one run".into()));
    }
    detect(params, image, cfg)?;
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        samples.push(detect(params, image, cfg)?.timings);
    }
    let pick = |f: fn(&StageTimings) -> f64| median(samples.iter().map(f).collect());
    Ok(BenchmarkReport {
        width: image.width(),
        height: image.height(),
        runs,
        stages: StageTimings {
            reconstruct_ms: pick(|t| t.reconstruct_ms),
            residual_ms: pick(|t| t.residual_ms),
            filter_ms: pick(|t| t.filter_ms),
            threshold_ms: pick(|t| t.threshold_ms),
            locate_ms: pick(|t| t.locate_ms),
        },
        total_ms: pick(StageTimings::total_ms),
        hardware: hardware_descriptor(),
    })
}
