//! Two-channel region masks and their A/B/C partition.
//!
//! Channel 0 marks the region to brighten (area A). Channel 1 marks area A
//! together with the transition band (area B). Everything else is area C,
//! which should stay as dark as the input.

use std::io::Cursor;
use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-major boolean plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "binary map of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Validated two-channel binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    inner: BinaryMap,
    outer: BinaryMap,
}

impl RegionMask {
    /// `inner` is channel 0 (area A), `outer` channel 1 (A ∪ B).
    pub fn new(inner: BinaryMap, outer: BinaryMap) -> Result<Self> {
        if (inner.height, inner.width) != (outer.height, outer.width) {
            return Err(Error::Shape(format!(
                "mask channels differ in size: {}x{} vs {}x{}",
                inner.height, inner.width, outer.height, outer.width
            )));
        }
        let count = inner
            .data
            .iter()
            .zip(&outer.data)
            .filter(|(&a, &ab)| a && !ab)
            .count();
        if count > 0 {
            return Err(Error::Containment { count });
        }
        Ok(Self { inner, outer })
    }

    /// Everything in area C.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            inner: BinaryMap::empty(height, width),
            outer: BinaryMap::empty(height, width),
        }
    }

    /// Everything in area A.
    pub fn full(height: usize, width: usize) -> Self {
        let ones = BinaryMap::from_fn(height, width, |_, _| true);
        Self {
            inner: ones.clone(),
            outer: ones,
        }
    }

    /// From a `(1, 2, H, W)` tensor whose entries must be exactly 0 or 1.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 2 {
            return Err(Error::InvalidMask(format!(
                "expected a (1, 2, H, W) tensor, got {:?}",
                t.shape()
            )));
        }
        let to_bits = |plane: &[T]| -> Result<Vec<bool>> {
            plane
                .iter()
                .map(|&v| {
                    if v == T::one() {
                        Ok(true)
                    } else if v == T::zero() {
                        Ok(false)
                    } else {
                        Err(Error::InvalidMask(format!("non-binary value {v}")))
                    }
                })
                .collect()
        };
        Self::new(
            BinaryMap::new(h, w, to_bits(t.channel_plane(0, 0))?)?,
            BinaryMap::new(h, w, to_bits(t.channel_plane(0, 1))?)?,
        )
    }

    pub fn height(&self) -> usize {
        self.inner.height
    }

    pub fn width(&self) -> usize {
        self.inner.width
    }

    pub fn inner(&self) -> &BinaryMap {
        &self.inner
    }

    pub fn outer(&self) -> &BinaryMap {
        &self.outer
    }

    /// `(1, 2, H, W)` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.height(), self.width());
        Tensor::from_fn([1, 2, h, w], |_, c, y, x| {
            let on = if c == 0 {
                self.inner.get(y, x)
            } else {
                self.outer.get(y, x)
            };
            if on {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn partition(&self) -> AreaPartition {
        AreaPartition::from_channels(&self.inner, &self.outer)
            .expect("RegionMask invariants guarantee a valid partition")
    }
}

/// Disjoint areas A, B, C and their pixel coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaPartition {
    pub area_a: BinaryMap,
    pub area_b: BinaryMap,
    pub area_c: BinaryMap,
    pub r_a: f64,
    pub r_b: f64,
    pub r_c: f64,
}

impl AreaPartition {
    /// A = {ch0}, B = {ch1 ∧ ¬ch0}, C = {¬ch1}. Rejects ch0 ⊄ ch1.
    pub fn from_channels(ch0: &BinaryMap, ch1: &BinaryMap) -> Result<Self> {
        let (h, w) = (ch0.height, ch0.width);
        if (ch1.height, ch1.width) != (h, w) {
            return Err(Error::Shape("mask channels differ in size".into()));
        }
        let mut a = Vec::with_capacity(h * w);
        let mut b = Vec::with_capacity(h * w);
        let mut c = Vec::with_capacity(h * w);
        let mut violations = 0;
        for (&i, &o) in ch0.data.iter().zip(&ch1.data) {
            if i && !o {
                violations += 1;
            }
            a.push(i);
            b.push(o && !i);
            c.push(!o);
        }
        if violations > 0 {
            return Err(Error::Containment { count: violations });
        }
        let total = (h * w) as f64;
        let (na, nb, nc) = (
            a.iter().filter(|&&v| v).count(),
            b.iter().filter(|&&v| v).count(),
            c.iter().filter(|&&v| v).count(),
        );
        Ok(Self {
            area_a: BinaryMap::new(h, w, a)?,
            area_b: BinaryMap::new(h, w, b)?,
            area_c: BinaryMap::new(h, w, c)?,
            r_a: na as f64 / total,
            r_b: nb as f64 / total,
            r_c: nc as f64 / total,
        })
    }

    pub fn height(&self) -> usize {
        self.area_a.height
    }

    pub fn width(&self) -> usize {
        self.area_a.width
    }
}

/// Concentric circles: radius `r1` bounds area A, `r2` bounds A ∪ B.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleSpec {
    pub center_x: f64,
    pub center_y: f64,
    pub r1: f64,
    pub r2: f64,
}

impl CircleSpec {
    pub fn new(center_x: f64, center_y: f64, r1: f64, r2: f64) -> Result<Self> {
        if !(r1 > 0.0 && r1 < r2) || !center_x.is_finite() || !center_y.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "circle needs 0 < r1 < r2 and a finite center, got r1={r1}, r2={r2}"
            )));
        }
        Ok(Self {
            center_x,
            center_y,
            r1,
            r2,
        })
    }

    /// Parse `cx,cy,r1,r2`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("circle '{s}': {e}")))?;
        match parts[..] {
            [cx, cy, r1, r2] => Self::new(cx, cy, r1, r2),
            _ => Err(Error::InvalidArgument(format!(
                "circle '{s}' must be cx,cy,r1,r2"
            ))),
        }
    }

    /// Whether the center lies inside an `height × width` image.
    pub fn center_within(&self, height: usize, width: usize) -> bool {
        self.center_x >= 0.0
            && self.center_y >= 0.0
            && self.center_x < width as f64
            && self.center_y < height as f64
    }

    /// Pixel `(y, x)` has its center at `(x + 0.5, y + 0.5)`; a distance equal
    /// to the radius counts as inside.
    pub fn rasterize(&self, height: usize, width: usize) -> RegionMask {
        let dist2 = |y: usize, x: usize| {
            let dx = x as f64 + 0.5 - self.center_x;
            let dy = y as f64 + 0.5 - self.center_y;
            dx * dx + dy * dy
        };
        let (r1s, r2s) = (self.r1 * self.r1, self.r2 * self.r2);
        RegionMask {
            inner: BinaryMap::from_fn(height, width, |y, x| dist2(y, x) <= r1s),
            outer: BinaryMap::from_fn(height, width, |y, x| dist2(y, x) <= r2s),
        }
    }
}

/// Inner radius `2·min(H, W) / 7` of the experimental circle masks.
pub fn inner_radius(height: usize, width: usize) -> f64 {
    2.0 * height.min(width) as f64 / 7.0
}

/// Draw one circle mask from an existing generator.
pub fn sample_circle_with<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
) -> Result<(RegionMask, CircleSpec)> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!(
            "circle masks need H, W >= 8, got {height}x{width}"
        )));
    }
    let r1 = inner_radius(height, width);
    let r2 = rng.random_range(1.2 * r1..=1.25 * r1);
    let center_x = rng.random_range(0.0..width as f64);
    let center_y = rng.random_range(0.0..height as f64);
    let spec = CircleSpec::new(center_x, center_y, r1, r2)?;
    Ok((spec.rasterize(height, width), spec))
}

/// Seeded circle mask: `r1 = 2m/7`, `r2 ~ U(1.2·r1, 1.25·r1)`, center uniform
/// over the image (the circles may be clipped by the border).
pub fn sample_circle(height: usize, width: usize, seed: u64) -> Result<(RegionMask, CircleSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_circle_with(&mut rng, height, width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandMode {
    /// The input is area A; the band grows outward.
    DilateOut,
    /// The input is A ∪ B; area A shrinks inward.
    ErodeIn,
}

impl std::str::FromStr for BandMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dilate-out" | "dilate" => Ok(Self::DilateOut),
            "erode-in" | "erode" => Ok(Self::ErodeIn),
            other => Err(Error::InvalidArgument(format!(
                "unknown band mode '{other}' (expected dilate-out or erode-in)"
            ))),
        }
    }
}

/// A derived mask, with a flag when erosion removed every area-A pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedMask {
    pub mask: RegionMask,
    pub empty_inner: bool,
}

impl DerivedMask {
    pub fn warning(&self) -> Option<String> {
        self.empty_inner.then(|| {
            "erosion removed every area-A pixel; the band radius is too large for this mask"
                .to_string()
        })
    }
}

/// Offsets `(dy, dx)` with `dy² + dx² ≤ r²`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn morph(map: &BinaryMap, radius: usize, dilate: bool) -> BinaryMap {
    let offsets = disk_offsets(radius);
    let (h, w) = (map.height as isize, map.width as isize);
    BinaryMap::from_fn(map.height, map.width, |y, x| {
        let mut inside = offsets.iter().filter_map(|&(dy, dx)| {
            let (sy, sx) = (y as isize + dy, x as isize + dx);
            (sy >= 0 && sx >= 0 && sy < h && sx < w).then(|| map.get(sy as usize, sx as usize))
        });
        if dilate {
            inside.any(|v| v)
        } else {
            // Taps outside the image are ignored, so regions touching the
            // border are not eaten away from it.
            inside.all(|v| v)
        }
    })
}

pub fn dilate(map: &BinaryMap, radius: usize) -> BinaryMap {
    morph(map, radius, true)
}

pub fn erode(map: &BinaryMap, radius: usize) -> BinaryMap {
    morph(map, radius, false)
}

/// Build a two-channel mask from a single binary map using a disk-shaped
/// structuring element.
pub fn derive_band(map: &BinaryMap, mode: BandMode, radius_px: usize) -> Result<DerivedMask> {
    if radius_px == 0 {
        return Err(Error::InvalidArgument("band radius must be >= 1 pixel".into()));
    }
    let (inner, outer) = match mode {
        BandMode::DilateOut => (map.clone(), dilate(map, radius_px)),
        BandMode::ErodeIn => (erode(map, radius_px), map.clone()),
    };
    let empty_inner = inner.is_empty();
    Ok(DerivedMask {
        mask: RegionMask::new(inner, outer)?,
        empty_inner,
    })
}

fn rgb_from_mask(mask: &RegionMask) -> RgbImage {
    RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let r = if mask.inner.get(y, x) { 255 } else { 0 };
        let g = if mask.outer.get(y, x) { 255 } else { 0 };
        image::Rgb([r, g, 0])
    })
}

/// PNG bytes: R = channel 0, G = channel 1, B = 0, all as 0/255.
pub fn encode_mask_png(mask: &RegionMask) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    rgb_from_mask(mask).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Inverse of [`encode_mask_png`]. Only 8-bit RGB PNGs are accepted; a
/// channel value of 128 or more reads as set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<RegionMask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::InvalidMask(format!(
            "mask PNG must be 8-bit RGB, got {:?}",
            img.color()
        )));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let inner = BinaryMap::from_fn(h, w, |y, x| rgb.get_pixel(x as u32, y as u32)[0] >= 128);
    let outer = BinaryMap::from_fn(h, w, |y, x| rgb.get_pixel(x as u32, y as u32)[1] >= 128);
    RegionMask::new(inner, outer)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &RegionMask) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask_png(mask)?).map_err(Error::file(path))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<RegionMask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    decode_mask_png(&bytes)
}

/// Single-channel binary map from any image: luminance ≥ 128 is set.
/// Used for user-drawn or segmentation masks that feed [`derive_band`].
pub fn decode_binary_map(bytes: &[u8]) -> Result<BinaryMap> {
    let img = image::load_from_memory(bytes)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMap::from_fn(h, w, |y, x| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

pub fn load_binary_map(path: impl AsRef<Path>) -> Result<BinaryMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    decode_binary_map(&bytes)
}
