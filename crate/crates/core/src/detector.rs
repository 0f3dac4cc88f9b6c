//! Reconstruction-residual defect detection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{ImageBuffer, Rgb};
use serde::Serialize;

use crate::data::{reflect_index, stitch, tile, GrayMap, Mask, PatchBatch};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{BatchNormMode, Tensor, Var};

/// Tiles per forward pass during reconstruction.
const RECONSTRUCT_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Side of the square mean filter, odd.
    pub filter_kernel: usize,
    /// Threshold is `mean + k * std` of the filtered residual.
    pub k: f64,
    /// Connected components smaller than this are discarded.
    pub min_area: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            filter_kernel: 5,
            k: 3.0,
            min_area: 4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_kernel == 0 || self.filter_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter kernel must be a positive odd integer, got {}",
                self.filter_kernel
            )));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::Config(format!("threshold k must be positive, got {}", self.k)));
        }
        Ok(())
    }
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub area: usize,
    pub peak: f32,
}

/// Wall-clock milliseconds per pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub reconstruct_ms: f64,
    pub residual_ms: f64,
    pub filter_ms: f64,
    pub threshold_ms: f64,
    pub locate_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.reconstruct_ms + self.residual_ms + self.filter_ms + self.threshold_ms + self.locate_ms
    }
}

#[derive(Clone, Debug)]
pub struct DetectionResult {
    pub reconstruction: GrayMap,
    pub residual: GrayMap,
    pub filtered: GrayMap,
    /// Union of the surviving regions.
    pub mask: Mask,
    pub regions: Vec<Region>,
    pub timings: StageTimings,
}

/// Runs the network over non-overlapping tiles in eval mode and stitches
/// the output back to the input size.
pub fn reconstruct(params: &ModelParams, image: &GrayMap) -> Result<GrayMap> {
    let block = params.config().block_size;
    let (grid, batch) = tile(image, block)?;
    let model = params.bind::<f32>(false);
    let mut out = Vec::with_capacity(batch.tensor.len());
    for start in (0..batch.len()).step_by(RECONSTRUCT_CHUNK) {
        let chunk = batch.slice(start..(start + RECONSTRUCT_CHUNK).min(batch.len()));
        let y = model.forward(&Var::constant(chunk.tensor), BatchNormMode::Eval)?;
        out.extend_from_slice(y.value().data());
    }
    let rebuilt = PatchBatch {
        tensor: Tensor::new(batch.tensor.shape().to_vec(), out)?,
        coords: batch.coords,
        block_size: block,
    };
    stitch(&grid, &rebuilt)
}

/// Per-pixel squared difference.
pub fn residual(src: &GrayMap, rec: &GrayMap) -> Result<GrayMap> {
    if !src.same_dims(rec) {
        return Err(Error::shape(
            "residual",
            format!("source is {:?} but reconstruction is {:?}", src.dims(), rec.dims()),
        ));
    }
    let data = src
        .data()
        .iter()
        .zip(rec.data())
        .map(|(&s, &r)| (s - r) * (s - r))
        .collect();
    GrayMap::from_vec(src.width(), src.height(), data)
}

/// Box average over a `kernel x kernel` window with symmetric reflection at
/// the borders.
pub fn mean_filter(map: &GrayMap, kernel: usize) -> Result<GrayMap> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("mean filter kernel must be odd, got {kernel}")));
    }
    let (w, h) = map.dims();
    if kernel > w || kernel > h {
        return Err(Error::shape(
            "mean_filter",
            format!("kernel {kernel} exceeds the {w}x{h} map"),
        ));
    }
    let r = (kernel / 2) as isize;
    let src = map.data();
    let mut rows = vec![0f64; w * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        let mut acc: f64 = (-r..=r).map(|d| line[reflect_index(d, w)] as f64).sum();
        for x in 0..w {
            rows[y * w + x] = acc;
            let xi = x as isize;
            acc += line[reflect_index(xi + r + 1, w)] as f64 - line[reflect_index(xi - r, w)] as f64;
        }
    }
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut out = vec![0f32; w * h];
    for x in 0..w {
        let at = |y: isize| rows[reflect_index(y, h) * w + x];
        let mut acc: f64 = (-r..=r).map(at).sum();
        for y in 0..h {
            out[y * w + x] = (acc * norm) as f32;
            let yi = y as isize;
            acc += at(yi + r + 1) - at(yi - r);
        }
    }
    GrayMap::from_vec(w, h, out)
}

/// Flags pixels above `mean + k * std` (population statistics). A constant
/// map yields an empty mask.
pub fn adaptive_threshold(filtered: &GrayMap, k: f64) -> Result<Mask> {
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Config(format!("threshold k must be positive, got {k}")));
    }
    let data = filtered.data();
    let empty = Mask::filled(filtered.width(), filtered.height(), false);
    let Some(&first) = data.first() else {
        return Ok(empty);
    };
    if data.iter().all(|&v| v == first) {
        return Ok(empty);
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(empty);
    }
    let t = mean + k * std;
    Mask::from_vec(
        filtered.width(),
        filtered.height(),
        data.iter().map(|&v| v as f64 > t).collect(),
    )
}

/// 8-connected components of `mask` with at least `min_area` pixels, in
/// raster order of their first pixel. `values` supplies each region's peak.
pub fn locate(mask: &Mask, values: &GrayMap, min_area: usize) -> Result<Vec<Region>> {
    Ok(locate_with_mask(mask, values, min_area)?.0)
}

/// Like [`locate`], also returning the mask restricted to surviving regions.
pub fn locate_with_mask(mask: &Mask, values: &GrayMap, min_area: usize) -> Result<(Vec<Region>, Mask)> {
    if !mask.same_dims(values) {
        return Err(Error::shape(
            "locate",
            format!("mask is {:?} but values are {:?}", mask.dims(), values.dims()),
        ));
    }
    let (w, h) = mask.dims();
    let bits = mask.data();
    let mut seen = vec![false; w * h];
    let mut kept = Mask::filled(w, h, false);
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for start in 0..w * h {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        members.clear();
        while let Some(p) = stack.pop() {
            members.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if bits[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if members.len() < min_area {
            continue;
        }
        let mut bbox = BoundingBox {
            top: usize::MAX,
            left: usize::MAX,
            bottom: 0,
            right: 0,
        };
        let mut peak = f32::NEG_INFINITY;
        for &p in &members {
            let (y, x) = (p / w, p % w);
            bbox.top = bbox.top.min(y);
            bbox.bottom = bbox.bottom.max(y);
            bbox.left = bbox.left.min(x);
            bbox.right = bbox.right.max(x);
            peak = peak.max(values.data()[p]);
            kept.data_mut()[p] = true;
        }
        regions.push(Region {
            bbox,
            area: members.len(),
            peak,
        });
    }
    Ok((regions, kept))
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Reconstruction, residual, mean filter, threshold and localization.
pub fn detect(params: &ModelParams, image: &GrayMap, cfg: &DetectorConfig) -> Result<DetectionResult> {
    cfg.validate()?;
    let t = Instant::now();
    let reconstruction = reconstruct(params, image)?;
    let reconstruct_ms = elapsed_ms(t);
    let t = Instant::now();
    let res = residual(image, &reconstruction)?;
    let residual_ms = elapsed_ms(t);
    let t = Instant::now();
    let filtered = mean_filter(&res, cfg.filter_kernel)?;
    let filter_ms = elapsed_ms(t);
    let t = Instant::now();
    let raw = adaptive_threshold(&filtered, cfg.k)?;
    let threshold_ms = elapsed_ms(t);
    let t = Instant::now();
    let (regions, mask) = locate_with_mask(&raw, &res, cfg.min_area)?;
    let locate_ms = elapsed_ms(t);
    Ok(DetectionResult {
        reconstruction,
        residual: res,
        filtered,
        mask,
        regions,
        timings: StageTimings {
            reconstruct_ms,
            residual_ms,
            filter_ms,
            threshold_ms,
            locate_ms,
        },
    })
}

/// Viridis-like anchors at evenly spaced positions in `[0, 1]`.
const RAMP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Colour for a value in `[0, 1]`, linearly interpolated between anchors.
pub fn ramp_color(t: f32) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (RAMP.len() - 1) as f32;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - i as f32;
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let a = RAMP[i][ch] as f32;
        let b = RAMP[i + 1][ch] as f32;
        *o = (a + (b - a) * f).round() as u8;
    }
    out
}

/// Writes `map` scaled by its maximum through the colour ramp.
pub fn save_heatmap_png(map: &GrayMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let max = map.data().iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut raw = Vec::with_capacity(map.data().len() * 3);
    for &v in map.data() {
        raw.extend_from_slice(&ramp_color(v * scale));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, raw).expect("buffer sized from map");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// One JSON object per line: `{"box":{...},"area":..,"peak":..}`.
pub fn write_regions_jsonl(regions: &[Region], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in regions {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub heatmap: PathBuf,
    pub mask: PathBuf,
    pub regions: PathBuf,
}

/// Writes `<stem>_heatmap.png`, `<stem>_mask.png` and `<stem>_regions.jsonl`
/// into `dir`.
pub fn write_artifacts(result: &DetectionResult, dir: impl AsRef<Path>, stem: &str) -> Result<ArtifactPaths> {
    let dir = dir.as_ref();
    let paths = ArtifactPaths {
        heatmap: dir.join(format!("{stem}_heatmap.png")),
        mask: dir.join(format!("{stem}_mask.png")),
        regions: dir.join(format!("{stem}_regions.jsonl")),
    };
    save_heatmap_png(&result.residual, &paths.heatmap)?;
    crate::data::save_mask_png(&result.mask, &paths.mask)?;
    write_regions_jsonl(&result.regions, &paths.regions)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(w: usize, h: usize, seed: u64) -> GrayMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayMap::from_fn(w, h, |_, _| rng.gen::<f32>())
    }

    #[test]
    fn residual_examples() {
        let a = random_map(7, 5, 1);
        assert!(residual(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let src = GrayMap::filled(2, 2, 1.0);
        let mut rec = src.clone();
        rec.set(1, 0, 0.5);
        let r = residual(&src, &rec).unwrap();
        assert_eq!(*r.get(1, 0), 0.25);
        assert_eq!(r.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(residual(&src, &random_map(3, 2, 0)).is_err());
    }

    #[test]
    fn mean_filter_constant_and_impulse() {
        let c = GrayMap::filled(9, 6, 0.3);
        for v in mean_filter(&c, 5).unwrap().data() {
            assert!((v - 0.3).abs() < 1e-7);
        }
        let mut imp = GrayMap::filled(9, 9, 0.0);
        imp.set(4, 4, 1.0);
        let f = mean_filter(&imp, 3).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let expect = if (3..=5).contains(&r) && (3..=5).contains(&c) {
                    1.0 / 9.0
                } else {
                    0.0
                };
                assert!((f.get(r, c) - expect).abs() < 1e-7, "({r},{c})");
            }
        }
    }

    #[test]
    fn mean_filter_matches_brute_force() {
        for seed in 0..5 {
            let m = random_map(16, 16, seed);
            for k in [1, 3, 5, 7] {
                let f = mean_filter(&m, k).unwrap();
                let r = (k / 2) as isize;
                for y in 0..16 {
                    for x in 0..16 {
                        let mut acc = 0.0f64;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let yy = reflect_index(y as isize + dy, 16);
                                let xx = reflect_index(x as isize + dx, 16);
                                acc += *m.get(yy, xx) as f64;
                            }
                        }
                        let expect = acc / (k * k) as f64;
                        assert!((*f.get(y, x) as f64 - expect).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn mean_filter_rejects_bad_kernels() {
        let m = random_map(8, 8, 0);
        assert!(matches!(mean_filter(&m, 4), Err(Error::Config(_))));
        assert!(mean_filter(&m, 9).is_err());
    }

    #[test]
    fn threshold_constant_is_empty() {
        let m = GrayMap::filled(10, 10, 0.7);
        assert_eq!(adaptive_threshold(&m, 3.0).unwrap().count(), 0);
        assert!(adaptive_threshold(&m, 0.0).is_err());
    }

    #[test]
    fn threshold_flags_filtered_impulse() {
        let mut m = GrayMap::filled(100, 100, 0.0);
        m.set(50, 50, 1.0);
        let f = mean_filter(&m, 5).unwrap();
        // Oracle: 25 pixels at 1/25 and the rest zero.
        let n = 10_000.0f64;
        let v = 1.0 / 25.0;
        let mean = 25.0 * v / n;
        let std = ((25.0 * (v - mean).powi(2) + (n - 25.0) * mean * mean) / n).sqrt();
        assert!(v > mean + 3.0 * std);
        let mask = adaptive_threshold(&f, 3.0).unwrap();
        assert_eq!(mask.count(), 25);
        for r in 48..=52 {
            for c in 48..=52 {
                assert!(*mask.get(r, c));
            }
        }
    }

    #[test]
    fn locate_two_squares() {
        let mut mask = Mask::filled(12, 12, false);
        let values = GrayMap::from_fn(12, 12, |r, c| (r * 12 + c) as f32);
        for (t, l) in [(1, 1), (7, 6)] {
            for r in t..t + 3 {
                for c in l..l + 3 {
                    mask.set(r, c, true);
                }
            }
        }
        mask.set(0, 11, true);
        let regions = locate(&mask, &values, 4).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(
            regions[0].bbox,
            BoundingBox {
                top: 1,
                left: 1,
                bottom: 3,
                right: 3
            }
        );
        assert_eq!(regions[0].area, 9);
        assert_eq!(regions[0].peak, (3 * 12 + 3) as f32);
        assert_eq!(
            regions[1].bbox,
            BoundingBox {
                top: 7,
                left: 6,
                bottom: 9,
                right: 8
            }
        );
        assert!(locate(&Mask::filled(5, 5, false), &GrayMap::filled(5, 5, 0.0), 4)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let mut mask = Mask::filled(4, 4, false);
        for i in 0..4 {
            mask.set(i, i, true);
        }
        let regions = locate(&mask, &GrayMap::filled(4, 4, 1.0), 4).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].area, 4);
    }

    #[test]
    fn region_areas_count_surviving_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mask = Mask::from_fn(30, 20, |_, _| rng.gen_bool(0.3));
            let values = GrayMap::filled(30, 20, 0.0);
            let (regions, kept) = locate_with_mask(&mask, &values, 4).unwrap();
            assert_eq!(regions.iter().map(|r| r.area).sum::<usize>(), kept.count());
            assert!(kept.data().iter().zip(mask.data()).all(|(&k, &m)| !k || m));
        }
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp_color(0.0), [68, 1, 84]);
        assert_eq!(ramp_color(1.0), [253, 231, 37]);
        assert_eq!(ramp_color(2.0), ramp_color(1.0));
    }

    #[test]
    fn detect_composes_stages() {
        let params = ModelParams::build(ModelConfig::with_block_size(16), 0).unwrap();
        let img = random_map(40, 24, 5);
        let cfg = DetectorConfig::default();
        let res = detect(&params, &img, &cfg).unwrap();
        let rec = reconstruct(&params, &img).unwrap();
        assert_eq!(res.reconstruction, rec);
        assert!(rec.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let r = residual(&img, &rec).unwrap();
        assert_eq!(res.residual, r);
        let f = mean_filter(&r, 5).unwrap();
        assert_eq!(res.filtered, f);
        let raw = adaptive_threshold(&f, 3.0).unwrap();
        let (regions, mask) = locate_with_mask(&raw, &r, 4).unwrap();
        assert_eq!(res.regions, regions);
        assert_eq!(res.mask, mask);
        assert!(res.timings.total_ms() >= 0.0 && res.timings.reconstruct_ms > 0.0);
        let again = detect(&params, &img, &cfg).unwrap();
        assert_eq!(again.mask, res.mask);
        assert_eq!(again.residual, res.residual);
    }

    #[test]
    fn artifacts_are_written() {
        let params = ModelParams::build(ModelConfig::with_block_size(16), 0).unwrap();
        let res = detect(&params, &random_map(20, 20, 1), &DetectorConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_artifacts(&res, dir.path(), "sample").unwrap();
        assert!(paths.heatmap.ends_with("sample_heatmap.png"));
        let lines = std::fs::read_to_string(&paths.regions).unwrap();
        assert_eq!(lines.lines().count(), res.regions.len());
        let first = std::fs::read(&paths.heatmap).unwrap();
        save_heatmap_png(&res.residual, &paths.heatmap).unwrap();
        assert_eq!(first, std::fs::read(&paths.heatmap).unwrap());
    }
}
