//! Image ingestion, patch sampling, tiling and synthetic textures.

use std::f32::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Grayscale intensities or any real-valued per-pixel map.
pub type GrayMap = Map2<f32>;
/// Binary per-pixel map, `true` marks a defect.
pub type Mask = Map2<bool>;

impl<T: Clone> Map2<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Map2 {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Map2<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "map",
                format!(
                    "{width}x{height} map needs {} values, got {}",
                    width * height,
                    data.len()
                ),
            ));
        }
        Ok(Map2 { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Map2 { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_dims<U>(&self, other: &Map2<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// One grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: GrayMap,
    pub path: PathBuf,
    /// Ground truth paired at load time for test images.
    pub mask: Option<Mask>,
}

impl ImageSample {
    pub fn new(pixels: GrayMap, path: impl Into<PathBuf>) -> Self {
        ImageSample {
            pixels,
            path: path.into(),
            mask: None,
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    /// File name without extension, used to name artifacts.
    pub fn stem(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_owned())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetRole {
    Train,
    Test,
}

#[derive(Debug)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    /// Files that looked like images but failed to decode.
    pub skipped: Vec<(PathBuf, String)>,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "bmp", "pgm", "pnm", "ppm"];
const MASK_SUFFIX: &str = "_mask";

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes an image file into luminance values in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<GrayMap> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(to_gray(img))
}

fn to_gray(img: DynamicImage) -> GrayMap {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| (0.299 * p.0[0] + 0.587 * p.0[1] + 0.114 * p.0[2]).clamp(0.0, 1.0))
            .collect(),
    };
    GrayMap {
        width: w,
        height: h,
        data,
    }
}

/// Loads every decodable image in `dir`, sorted by file name. In the test
/// role `<name>_mask.<ext>` files are paired with `<name>.<ext>` instead of
/// being loaded as samples.
pub fn load_dataset(dir: impl AsRef<Path>, role: DatasetRole) -> Result<Dataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    files.sort();

    let is_mask = |p: &Path| {
        p.file_stem()
            .and_then(|s| s.to_str())
            .is_some_and(|s| s.ends_with(MASK_SUFFIX))
    };

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        if role == DatasetRole::Test && is_mask(path) {
            continue;
        }
        match load_gray(path) {
            Ok(pixels) => samples.push(ImageSample::new(pixels, path.clone())),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path.clone(), e.to_string()));
            }
        }
    }

    if role == DatasetRole::Test {
        for sample in &mut samples {
            let stem = sample.stem();
            let candidate = files.iter().find(|p| {
                is_mask(p) && p.file_stem().and_then(|s| s.to_str()) == Some(&format!("{stem}{MASK_SUFFIX}"))
            });
            if let Some(mask_path) = candidate {
                let gray = load_gray(mask_path)?;
                if !gray.same_dims(&sample.pixels) {
                    return Err(Error::Dataset(format!(
                        "mask {} is {}x{} but its image is {}x{}",
                        mask_path.display(),
                        gray.width,
                        gray.height,
                        sample.width(),
                        sample.height()
                    )));
                }
                sample.mask = Some(Map2 {
                    width: gray.width,
                    height: gray.height,
                    data: gray.data.iter().map(|&v| v > 0.0).collect(),
                });
            }
        }
    }

    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no decodable images in {} ({} skipped)",
            dir.display(),
            skipped.len()
        )));
    }
    Ok(Dataset { samples, skipped })
}

/// Writes values clamped to `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(map: &GrayMap, path: impl AsRef<Path>) -> Result<()> {
    let raw: Vec<u8> = map
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    save_luma8(map.width, map.height, raw, path.as_ref())
}

/// Writes a mask as 0/255 grayscale PNG.
pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let raw: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_luma8(mask.width, mask.height, raw, path.as_ref())
}

fn save_luma8(width: usize, height: usize, raw: Vec<u8>, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer sized from map");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Location of a patch inside its source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchCoord {
    pub image: usize,
    pub top: usize,
    pub left: usize,
}

/// `N x 1 x B x B` patches with their origins.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub tensor: Tensor<f32>,
    pub coords: Vec<PatchCoord>,
    pub block_size: usize,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Patches `range` as their own batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PatchBatch {
        let area = self.block_size * self.block_size;
        let data = self.tensor.data()[range.start * area..range.end * area].to_vec();
        PatchBatch {
            tensor: Tensor::new(vec![range.len(), 1, self.block_size, self.block_size], data)
                .expect("slice of a valid batch"),
            coords: self.coords[range].to_vec(),
            block_size: self.block_size,
        }
    }
}

fn copy_patch(src: &GrayMap, top: usize, left: usize, block: usize, out: &mut Vec<f32>) {
    for r in top..top + block {
        let start = r * src.width + left;
        out.extend_from_slice(&src.data[start..start + block]);
    }
}

/// Draws `count` patches uniformly over every valid top-left position of
/// every image.
pub fn sample_patches(images: &[ImageSample], block_size: usize, count: usize, seed: u64) -> Result<PatchBatch> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot sample patches from an empty image list".into()));
    }
    if block_size == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    let mut cumulative = Vec::with_capacity(images.len());
    let mut total = 0usize;
    for img in images {
        if img.width() < block_size || img.height() < block_size {
            return Err(Error::Dataset(format!(
                "{} is {}x{}, smaller than the {block_size}x{block_size} block",
                img.path.display(),
                img.width(),
                img.height()
            )));
        }
        total += (img.width() - block_size + 1) * (img.height() - block_size + 1);
        cumulative.push(total);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * block_size * block_size);
    for _ in 0..count {
        let pick = rng.gen_range(0..total);
        let image = cumulative.partition_point(|&c| c <= pick);
        let offset = pick - if image == 0 { 0 } else { cumulative[image - 1] };
        let img = &images[image];
        let cols = img.width() - block_size + 1;
        let coord = PatchCoord {
            image,
            top: offset / cols,
            left: offset % cols,
        };
        copy_patch(&img.pixels, coord.top, coord.left, block_size, &mut data);
        coords.push(coord);
    }
    Ok(PatchBatch {
        tensor: Tensor::new(vec![count, 1, block_size, block_size], data)?,
        coords,
        block_size,
    })
}

/// Symmetric reflection (edge pixel repeated) extended periodically, valid
/// for any offset.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Geometry of a non-overlapping tiling of a reflection-padded image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub block_size: usize,
    pub padded_width: usize,
    pub padded_height: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    /// Tile origins in padded coordinates, row-major.
    pub tiles: Vec<(usize, usize)>,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, block_size: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("tile", "image has no pixels"));
        }
        if block_size == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        let padded_width = width.div_ceil(block_size) * block_size;
        let padded_height = height.div_ceil(block_size) * block_size;
        let (pad_left, pad_top) = ((padded_width - width) / 2, (padded_height - height) / 2);
        let mut tiles = Vec::new();
        for top in (0..padded_height).step_by(block_size) {
            for left in (0..padded_width).step_by(block_size) {
                tiles.push((top, left));
            }
        }
        Ok(TileGrid {
            width,
            height,
            block_size,
            padded_width,
            padded_height,
            pad_top,
            pad_bottom: padded_height - height - pad_top,
            pad_left,
            pad_right: padded_width - width - pad_left,
            tiles,
        })
    }
}

/// Cuts an image into non-overlapping blocks after reflection padding.
pub fn tile(image: &GrayMap, block_size: usize) -> Result<(TileGrid, PatchBatch)> {
    let grid = TileGrid::new(image.width, image.height, block_size)?;
    let mut data = Vec::with_capacity(grid.tiles.len() * block_size * block_size);
    let mut coords = Vec::with_capacity(grid.tiles.len());
    for &(top, left) in &grid.tiles {
        for r in top..top + block_size {
            let sr = reflect_index(r as isize - grid.pad_top as isize, image.height);
            let row = &image.data[sr * image.width..(sr + 1) * image.width];
            for c in left..left + block_size {
                data.push(row[reflect_index(c as isize - grid.pad_left as isize, image.width)]);
            }
        }
        coords.push(PatchCoord { image: 0, top, left });
    }
    let batch = PatchBatch {
        tensor: Tensor::new(vec![coords.len(), 1, block_size, block_size], data)?,
        coords,
        block_size,
    };
    Ok((grid, batch))
}

/// Reassembles tiles produced by [`tile`] and crops the padding away.
pub fn stitch(grid: &TileGrid, patches: &PatchBatch) -> Result<GrayMap> {
    let b = grid.block_size;
    if patches.len() != grid.tiles.len() {
        return Err(Error::shape(
            "stitch",
            format!("grid has {} tiles, got {} patches", grid.tiles.len(), patches.len()),
        ));
    }
    if patches.block_size != b || patches.tensor.shape() != [patches.len(), 1, b, b] {
        return Err(Error::shape(
            "stitch",
            format!(
                "expected {} x 1 x {b} x {b} patches, got {:?}",
                grid.tiles.len(),
                patches.tensor.shape()
            ),
        ));
    }
    for (i, (coord, &(top, left))) in patches.coords.iter().zip(&grid.tiles).enumerate() {
        if coord.top != top || coord.left != left {
            return Err(Error::shape(
                "stitch",
                format!(
                    "patch {i} comes from ({}, {}) but the grid expects ({top}, {left})",
                    coord.top, coord.left
                ),
            ));
        }
    }
    let mut out = GrayMap::filled(grid.width, grid.height, 0.0);
    let src = patches.tensor.data();
    for (i, &(top, left)) in grid.tiles.iter().enumerate() {
        let patch = &src[i * b * b..(i + 1) * b * b];
        for pr in 0..b {
            let r = (top + pr) as isize - grid.pad_top as isize;
            if r < 0 || r as usize >= grid.height {
                continue;
            }
            for pc in 0..b {
                let c = (left + pc) as isize - grid.pad_left as isize;
                if c < 0 || c as usize >= grid.width {
                    continue;
                }
                out.set(r as usize, c as usize, patch[pr * b + pc]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Stripes,
    Checker,
    BlendedNoise,
}

impl TextureKind {
    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
            TextureKind::BlendedNoise => "blended_noise",
        }
    }
}

impl fmt::Display for TextureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(TextureKind::Stripes),
            "checker" => Ok(TextureKind::Checker),
            "blended_noise" | "blended-noise" => Ok(TextureKind::BlendedNoise),
            other => Err(Error::Config(format!(
                "unknown texture '{other}' (expected stripes, checker or blended_noise)"
            ))),
        }
    }
}

/// A planted defect. `delta` is added to the texture and the result clamped
/// to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Defect {
    /// Axis-aligned rectangle.
    Blob {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        delta: f32,
    },
    /// Diagonal line running down and to the right.
    Scratch {
        top: usize,
        left: usize,
        length: usize,
        thickness: usize,
        delta: f32,
    },
}

impl Defect {
    fn pixels(&self) -> Vec<(usize, usize)> {
        match *self {
            Defect::Blob {
                top,
                left,
                height,
                width,
                ..
            } => (top..top + height)
                .flat_map(|r| (left..left + width).map(move |c| (r, c)))
                .collect(),
            Defect::Scratch {
                top,
                left,
                length,
                thickness,
                ..
            } => (0..length)
                .flat_map(|i| (0..thickness).map(move |t| (top + i, left + i + t)))
                .collect(),
        }
    }

    fn extent(&self) -> (usize, usize, usize, usize) {
        match *self {
            Defect::Blob {
                top,
                left,
                height,
                width,
                ..
            } => (top, left, height, width),
            Defect::Scratch {
                top,
                left,
                length,
                thickness,
                ..
            } => (top, left, length, length + thickness.saturating_sub(1)),
        }
    }

    fn delta(&self) -> f32 {
        match *self {
            Defect::Blob { delta, .. } | Defect::Scratch { delta, .. } => delta,
        }
    }
}

/// Stripe period in pixels.
pub const STRIPE_PERIOD: usize = 8;
/// Side length of checker squares.
pub const CHECKER_CELL: usize = 8;
/// Amplitude of the uniform pixel noise added to every texture.
pub const TEXTURE_NOISE: f32 = 0.02;

/// Generates a texture with planted defects and the exact defect mask.
pub fn synth_texture(
    kind: TextureKind,
    width: usize,
    height: usize,
    defects: &[Defect],
    seed: u64,
) -> Result<(ImageSample, Mask)> {
    synth_texture_with_noise(kind, width, height, defects, seed, TEXTURE_NOISE)
}

/// [`synth_texture`] with uniform pixel noise of amplitude `noise` (0 for a
/// noise-free texture).
pub fn synth_texture_with_noise(
    kind: TextureKind,
    width: usize,
    height: usize,
    defects: &[Defect],
    seed: u64,
    noise: f32,
) -> Result<(ImageSample, Mask)> {
    if width == 0 || height == 0 {
        return Err(Error::Config("texture size must be positive".into()));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Config(format!(
            "noise amplitude must be non-negative, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = match kind {
        TextureKind::Stripes => {
            let phase: f32 = rng.gen_range(0.0..STRIPE_PERIOD as f32);
            GrayMap::from_fn(width, height, |_, c| {
                0.5 + 0.3 * (2.0 * PI * (c as f32 + phase) / STRIPE_PERIOD as f32).sin()
            })
        }
        TextureKind::Checker => {
            let (dr, dc) = (rng.gen_range(0..2 * CHECKER_CELL), rng.gen_range(0..2 * CHECKER_CELL));
            GrayMap::from_fn(width, height, |r, c| {
                if ((r + dr) / CHECKER_CELL + (c + dc) / CHECKER_CELL).is_multiple_of(2) {
                    0.3
                } else {
                    0.7
                }
            })
        }
        TextureKind::BlendedNoise => blended_noise(width, height, &mut rng),
    };
    if noise > 0.0 {
        for v in pixels.data_mut() {
            *v = (*v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
        }
    }

    let mut mask = Mask::filled(width, height, false);
    for (i, d) in defects.iter().enumerate() {
        let (top, left, h, w) = d.extent();
        if h == 0 || w == 0 || top + h > height || left + w > width {
            return Err(Error::Config(format!(
                "defect {i} ({d:?}) does not fit inside the {width}x{height} image"
            )));
        }
        for (r, c) in d.pixels() {
            let v = pixels.get(r, c) + d.delta();
            pixels.set(r, c, v.clamp(0.0, 1.0));
            mask.set(r, c, true);
        }
    }
    let sample = ImageSample::new(pixels, format!("synthetic_{kind}_{seed}.png"));
    Ok((sample, mask))
}

/// Bilinearly upsampled coarse noise blended with a finer octave.
fn blended_noise(width: usize, height: usize, rng: &mut ChaCha8Rng) -> GrayMap {
    let octave = |cell: usize, rng: &mut ChaCha8Rng| {
        let gw = width / cell + 2;
        let gh = height / cell + 2;
        let grid: Vec<f32> = (0..gw * gh).map(|_| rng.gen::<f32>()).collect();
        GrayMap::from_fn(width, height, |r, c| {
            let (fr, fc) = (r as f32 / cell as f32, c as f32 / cell as f32);
            let (r0, c0) = (fr as usize, fc as usize);
            let (tr, tc) = (fr - r0 as f32, fc - c0 as f32);
            let g = |rr: usize, cc: usize| grid[rr * gw + cc];
            let top = g(r0, c0) * (1.0 - tc) + g(r0, c0 + 1) * tc;
            let bottom = g(r0 + 1, c0) * (1.0 - tc) + g(r0 + 1, c0 + 1) * tc;
            top * (1.0 - tr) + bottom * tr
        })
    };
    let coarse = octave(16, rng);
    let fine = octave(4, rng);
    GrayMap::from_fn(width, height, |r, c| {
        0.2 + 0.6 * (0.7 * coarse.get(r, c) + 0.3 * fine.get(r, c))
    })
}

/// `count` square blobs with random sides in `[min_side, max_side]` placed
/// fully inside the image, each darkening or brightening by `|delta|`.
pub fn random_blobs(
    width: usize,
    height: usize,
    count: usize,
    min_side: usize,
    max_side: usize,
    delta: f32,
    seed: u64,
) -> Result<Vec<Defect>> {
    if min_side == 0 || min_side > max_side || max_side > width.min(height) {
        return Err(Error::Config(format!(
            "blob sides {min_side}..={max_side} do not fit a {width}x{height} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let side = rng.gen_range(min_side..=max_side);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Defect::Blob {
                top: rng.gen_range(0..=height - side),
                left: rng.gen_range(0..=width - side),
                height: side,
                width: side,
                delta: sign * delta.abs(),
            }
        })
        .collect())
}
