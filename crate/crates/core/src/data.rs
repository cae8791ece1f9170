//! Paired low/normal-light datasets: folder loading, resizing, and a
//! procedural generator for small experiments.
//!
//! Layout on disk is `root/low/<name>.png` paired with `root/high/<name>.png`
//! (PNG or JPEG, matched by file stem).

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LOW_DIR: &str = "low";
pub const HIGH_DIR: &str = "high";
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// A low-light input and its reference, both `(1, 3, H, W)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub low: Tensor<f32>,
    pub reference: Tensor<f32>,
}

impl PairedSample {
    pub fn height(&self) -> usize {
        self.low.height()
    }

    pub fn width(&self) -> usize {
        self.low.width()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    /// Files present on one side only, as `low/<file>` or `high/<file>`.
    pub skipped: Vec<String>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `(1, 3, H, W)` tensor with values `v / 255`.
pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        T::lit(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

/// Quantise sample `n` of an RGB tensor to 8 bits (round to nearest).
pub fn tensor_to_rgb<T: Real>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", t.channels())));
    }
    let (h, w) = (t.height(), t.width());
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| quantize(t.at(n, c, y as usize, x as usize).as_f64());
        image::Rgb([px(0), px(1), px(2)])
    }))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.into_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    decode_image(&bytes)
}

pub fn save_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)?).map_err(Error::file(path))
}

/// Output size for a long-edge resize, rounding half up.
pub fn long_edge_size(height: usize, width: usize, target: usize) -> (usize, usize) {
    let long = height.max(width);
    let scale = |v: usize| (((v * target) as f64 / long as f64) + 0.5).floor().max(1.0) as usize;
    if height >= width {
        (target, scale(width))
    } else {
        (scale(height), target)
    }
}

/// Bilinear resize so the longer side equals `target`, keeping aspect ratio.
pub fn resize_long_edge(img: &RgbImage, target: usize) -> Result<RgbImage> {
    if target < 8 {
        return Err(Error::InvalidArgument(format!("resize target must be at least 8, got {target}")));
    }
    let (h, w) = (img.height() as usize, img.width() as usize);
    let (nh, nw) = long_edge_size(h, w, target);
    if (nh, nw) == (h, w) {
        return Ok(img.clone());
    }
    Ok(image::imageops::resize(img, nw as u32, nh as u32, FilterType::Triangle))
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(Error::file(dir))?;
    for entry in entries {
        let path = entry.map_err(Error::file(dir))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// Load every filename-matched pair under `root`, sorted by name.
/// `resize` applies [`resize_long_edge`] to both images.
pub fn load_paired_dir(root: impl AsRef<Path>, resize: Option<usize>) -> Result<PairedDataset> {
    let root = root.as_ref();
    let low = list_images(&root.join(LOW_DIR))?;
    let high = list_images(&root.join(HIGH_DIR))?;
    let mut skipped: Vec<String> = low
        .iter()
        .filter(|(k, _)| !high.contains_key(*k))
        .map(|(_, p)| format!("{LOW_DIR}/{}", file_name(p)))
        .chain(
            high.iter()
                .filter(|(k, _)| !low.contains_key(*k))
                .map(|(_, p)| format!("{HIGH_DIR}/{}", file_name(p))),
        )
        .collect();
    skipped.sort();
    let mut samples = Vec::new();
    for (id, low_path) in &low {
        let Some(high_path) = high.get(id) else { continue };
        let mut l = load_image(low_path)?;
        let mut r = load_image(high_path)?;
        if l.dimensions() != r.dimensions() {
            return Err(Error::Data(format!(
                "pair {id}: low is {:?} but high is {:?}",
                l.dimensions(),
                r.dimensions()
            )));
        }
        if let Some(target) = resize {
            l = resize_long_edge(&l, target)?;
            r = resize_long_edge(&r, target)?;
        }
        samples.push(PairedSample {
            id: id.clone(),
            low: rgb_to_tensor(&l),
            reference: rgb_to_tensor(&r),
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no matched image pairs under {}", root.display())));
    }
    for s in &skipped {
        tracing::warn!(file = %s, "skipping unpaired image");
    }
    Ok(PairedDataset { samples, skipped })
}

/// Write a dataset in the `low/`, `high/` layout as 8-bit PNGs.
pub fn save_paired_dir(root: impl AsRef<Path>, samples: &[PairedSample]) -> Result<()> {
    let root = root.as_ref();
    for sub in [LOW_DIR, HIGH_DIR] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(Error::file(&dir))?;
    }
    for s in samples {
        save_png(root.join(LOW_DIR).join(format!("{}.png", s.id)), &tensor_to_rgb(&s.low, 0)?)?;
        save_png(root.join(HIGH_DIR).join(format!("{}.png", s.id)), &tensor_to_rgb(&s.reference, 0)?)?;
    }
    Ok(())
}

/// How to divide a dataset into training and validation parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// The first `floor(fraction · N)` samples (in name order) train.
    Fraction(f64),
    /// Newline-separated ids of the training samples; the rest validate.
    File(PathBuf),
}

impl Default for Split {
    fn default() -> Self {
        Split::Fraction(0.9)
    }
}

/// Returns `(train, validation)`.
pub fn split_dataset(samples: Vec<PairedSample>, split: &Split) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    match split {
        Split::Fraction(f) => {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::InvalidArgument(format!("split fraction {f} outside [0, 1]")));
            }
            let k = (f * samples.len() as f64).floor() as usize;
            let mut train = samples;
            let val = train.split_off(k);
            Ok((train, val))
        }
        Split::File(path) => {
            let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
            let ids: std::collections::HashSet<&str> =
                text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            if let Some(missing) = ids.iter().find(|id| !samples.iter().any(|s| s.id == **id)) {
                return Err(Error::Data(format!("split file lists unknown id {missing}")));
            }
            Ok(samples.into_iter().partition(|s| ids.contains(s.id.as_str())))
        }
    }
}

/// Parameters of the procedural pair generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Darkening exponent range; `low = reference^γ`.
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Standard deviation of additive Gaussian noise on the low image.
    pub noise_sigma: f64,
    pub shapes_min: usize,
    pub shapes_max: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            gamma_min: 2.0,
            gamma_max: 3.0,
            noise_sigma: 0.01,
            shapes_min: 3,
            shapes_max: 7,
        }
    }
}

/// `n` procedural pairs of size `height × width` with default options.
pub fn synth_pairs(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PairedSample>> {
    synth_pairs_with(n, height, width, seed, &SynthOptions::default())
}

/// Reference images are smooth colour gradients with random rectangles and
/// disks; low images are `reference^γ` plus noise. Both are quantised to
/// 8 bits so a save/load round trip is lossless.
pub fn synth_pairs_with(
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<Vec<PairedSample>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    if !(opts.gamma_min <= opts.gamma_max && opts.gamma_min > 0.0) || opts.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument("invalid synthetic data options".into()));
    }
    if opts.shapes_min > opts.shapes_max {
        return Err(Error::InvalidArgument("shapes_min exceeds shapes_max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let (h, w) = (height, width);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let corners: Vec<[f64; 3]> = (0..4)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.2..0.9)))
            .collect();
        let mut reference = Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
            let fy = y as f64 / (h.max(2) - 1) as f64;
            let fx = x as f64 / (w.max(2) - 1) as f64;
            let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
            let bottom = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
            top * (1.0 - fy) + bottom * fy
        });
        let shapes = rng.random_range(opts.shapes_min..=opts.shapes_max);
        for _ in 0..shapes {
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(0.08..0.3) * h as f64;
            let rx = rng.random_range(0.08..0.3) * w as f64;
            let disk = rng.random_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                    let inside = if disk {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        for (c, v) in color.iter().enumerate() {
                            reference.set(0, c, y, x, *v);
                        }
                    }
                }
            }
        }
        let reference = reference.map(|v| quantize(v) as f64 / 255.0);
        let gamma = rng.random_range(opts.gamma_min..=opts.gamma_max);
        let low = Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
            let e = if opts.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            quantize(reference.at(0, c, y, x).powf(gamma) + e) as f64 / 255.0
        });
        out.push(PairedSample {
            id: format!("synth_{i:05}"),
            low: low.cast(),
            reference: reference.cast(),
        });
    }
    Ok(out)
}
