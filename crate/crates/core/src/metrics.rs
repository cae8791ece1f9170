//! Quality metrics restricted to the enhanced area, and a smoothness
//! diagnostic for the transition band.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{AreaPartition, BinaryMap};
use crate::stencil::SECOND_ORDER_DISTINCT;
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>, region: &BinaryMap) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.batch() != 1 {
        return Err(Error::Shape("metrics take a single image (batch 1)".into()));
    }
    if (a.height(), a.width()) != (region.height(), region.width()) {
        return Err(Error::Shape("mask size does not match the image".into()));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR over Area A: the MSE is averaged over A pixels only (equivalently,
/// full-frame masked MSE divided by `r_a`). Peak value 1, capped at 99 dB.
pub fn masked_psnr<T: Real>(enhanced: &Tensor<T>, reference: &Tensor<T>, partition: &AreaPartition) -> Result<f64> {
    let a = &partition.area_a;
    check_pair(enhanced, reference, a)?;
    if a.is_empty() {
        return Err(Error::InvalidMask("masked PSNR needs a non-empty area A".into()));
    }
    let mut acc = 0.0;
    for c in 0..enhanced.channels() {
        let (e, r) = (enhanced.channel_plane(0, c), reference.channel_plane(0, c));
        for (i, _) in a.data().iter().enumerate().filter(|(_, &m)| m) {
            let d = e[i].as_f64() - r[i].as_f64();
            acc += d * d;
        }
    }
    let mse = acc / (a.count() * enhanced.channels()) as f64;
    Ok(psnr_from_mse(mse))
}

/// The alternative reading: full-frame PSNR of the masked products, with the
/// dB value multiplied by `1 / r_a`. Reported for comparison only.
pub fn masked_psnr_literal<T: Real>(
    enhanced: &Tensor<T>,
    reference: &Tensor<T>,
    partition: &AreaPartition,
) -> Result<f64> {
    let a = &partition.area_a;
    check_pair(enhanced, reference, a)?;
    if a.is_empty() {
        return Err(Error::InvalidMask("masked PSNR needs a non-empty area A".into()));
    }
    let mut acc = 0.0;
    for c in 0..enhanced.channels() {
        let (e, r) = (enhanced.channel_plane(0, c), reference.channel_plane(0, c));
        for (i, _) in a.data().iter().enumerate().filter(|(_, &m)| m) {
            let d = e[i].as_f64() - r[i].as_f64();
            acc += d * d;
        }
    }
    let mse = acc / (enhanced.plane() * enhanced.channels()) as f64;
    Ok(psnr_from_mse(mse) / partition.r_a)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| taps[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one pair of planes over all valid window positions.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &taps);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &taps);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// SSIM of `M·Ŷ` against `M·Y` with `M` the Area-A indicator, averaged over
/// valid window positions and channels.
pub fn masked_ssim<T: Real>(enhanced: &Tensor<T>, reference: &Tensor<T>, area_a: &BinaryMap) -> Result<f64> {
    check_pair(enhanced, reference, area_a)?;
    let (h, w) = (enhanced.height(), enhanced.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let masked = |t: &Tensor<T>, c: usize| -> Vec<f64> {
        t.channel_plane(0, c)
            .iter()
            .zip(area_a.data())
            .map(|(v, &m)| if m { v.as_f64() } else { 0.0 })
            .collect()
    };
    let channels = enhanced.channels();
    let sum: f64 = (0..channels)
        .map(|c| ssim_plane(&masked(enhanced, c), &masked(reference, c), h, w))
        .sum();
    Ok(sum / channels as f64)
}

/// Unweighted second-order energy over the band:
/// `Σ_{p∈B} Σ_c (∂xx)² + 2(∂xy)² + (∂yy)²`.
pub fn b_curvature_energy<T: Real>(map: &Tensor<T>, area_b: &BinaryMap) -> Result<f64> {
    let [n, channels, h, w] = map.shape();
    if (h, w) != (area_b.height(), area_b.width()) {
        return Err(Error::Shape("mask size does not match the map".into()));
    }
    let mut acc = 0.0;
    for b in 0..n {
        for c in 0..channels {
            let plane = map.channel_plane(b, c);
            for y in 0..h {
                for x in 0..w {
                    if !area_b.get(y, x) {
                        continue;
                    }
                    for (stencil, mult) in SECOND_ORDER_DISTINCT {
                        let d = stencil.apply(plane, h, w, y, x).as_f64();
                        acc += mult * d * d;
                    }
                }
            }
        }
    }
    Ok(acc)
}

/// One image's scores; serialised as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub file: String,
    #[serde(rename = "psnr_db")]
    pub masked_psnr_db: f64,
    #[serde(rename = "ssim")]
    pub masked_ssim: f64,
    pub r_a: f64,
    #[serde(rename = "curvature_energy")]
    pub b_region_curvature_energy: f64,
    /// Area-A PSNR of the unenhanced input against the reference.
    pub input_psnr_db: f64,
    /// Mean absolute deviation from the input over Area C; `None` if C is empty.
    pub c_abs_dev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr_literal_db: Option<f64>,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serialises")
    }
}

/// Mean absolute difference over the pixels of `region`, or `None` if it
/// is empty.
pub fn region_abs_dev<T: Real>(a: &Tensor<T>, b: &Tensor<T>, region: &BinaryMap) -> Result<Option<f64>> {
    check_pair(a, b, region)?;
    if region.is_empty() {
        return Ok(None);
    }
    let mut acc = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.channel_plane(0, c), b.channel_plane(0, c));
        for (i, _) in region.data().iter().enumerate().filter(|(_, &m)| m) {
            acc += (pa[i].as_f64() - pb[i].as_f64()).abs();
        }
    }
    Ok(Some(acc / (region.count() * a.channels()) as f64))
}

/// Images taking part in scoring one prediction.
#[derive(Clone, Copy, Debug)]
pub struct ScoreInputs<'a, T> {
    pub enhanced: &'a Tensor<T>,
    pub reference: &'a Tensor<T>,
    pub input: &'a Tensor<T>,
    /// Map whose band smoothness is reported (output or illumination).
    pub band_map: &'a Tensor<T>,
}

/// Compute all scores for a single image.
pub fn score_image<T: Real>(
    file: impl Into<String>,
    images: ScoreInputs<'_, T>,
    partition: &AreaPartition,
    literal_psnr: bool,
) -> Result<MetricReport> {
    let ScoreInputs {
        enhanced,
        reference,
        input,
        band_map,
    } = images;
    Ok(MetricReport {
        file: file.into(),
        masked_psnr_db: masked_psnr(enhanced, reference, partition)?,
        masked_ssim: masked_ssim(enhanced, reference, &partition.area_a)?,
        r_a: partition.r_a,
        b_region_curvature_energy: b_curvature_energy(band_map, &partition.area_b)?,
        input_psnr_db: masked_psnr(input, reference, partition)?,
        c_abs_dev: region_abs_dev(enhanced, input, &partition.area_c)?,
        psnr_literal_db: if literal_psnr {
            Some(masked_psnr_literal(enhanced, reference, partition)?)
        } else {
            None
        },
    })
}

/// Means over a set of reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub images: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub curvature_energy: f64,
    pub input_psnr_db: f64,
    /// Mean over images with a non-empty Area C.
    pub c_abs_dev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr_literal_db: Option<f64>,
}

impl MetricSummary {
    pub fn from_reports(reports: &[MetricReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let literal = reports
            .iter()
            .map(|r| r.psnr_literal_db)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / n);
        Self {
            images: reports.len(),
            psnr_db: mean(&|r| r.masked_psnr_db),
            ssim: mean(&|r| r.masked_ssim),
            curvature_energy: mean(&|r| r.b_region_curvature_energy),
            input_psnr_db: mean(&|r| r.input_psnr_db),
            c_abs_dev: {
                let devs: Vec<f64> = reports.iter().filter_map(|r| r.c_abs_dev).collect();
                (!devs.is_empty()).then(|| devs.iter().sum::<f64>() / devs.len() as f64)
            },
            psnr_literal_db: literal,
        }
    }
}
