//! Region-aware training objective.
//!
//! * Area A: the backbone's own enhancement losses (reconstruction, colour,
//!   and for illumination models a first-order edge-aware smoothness prior).
//! * Area B: the gradient-smooth loss, an edge-aware penalty on second-order
//!   differences of the illumination map (or of the output for curve models).
//! * Area C: reconstruction of the dark input.
//!
//! Each term is divided by the coverage of its area; a term whose area is
//! empty is dropped. All terms are computed per sample and averaged over the
//! batch.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::masks::{AreaPartition, BinaryMap};
use crate::stencil::{luminance, Stencil, SECOND_ORDER_DISTINCT};
use crate::tensor::{Real, Tensor};

/// Lower clamp applied before taking `log` of the input luminance.
pub const LOG_FLOOR: f64 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the area-A term.
    pub alpha_w: f64,
    /// Weight of the area-B gradient-smooth term.
    pub beta_w: f64,
    /// Weight of the area-C reconstruction term.
    pub gamma_w: f64,
    /// Sensitivity `s` of the edge weights to input gradients.
    pub s_exponent: f64,
    /// `ε` in the edge weights `(|∂ log I|^s + ε)^-1`.
    pub eps_w: f64,
    pub recon_w: f64,
    pub color_w: f64,
    /// Only used by illumination (Retinex) backbones.
    pub illum_smooth_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_w: 1.0,
            beta_w: 1e-4,
            gamma_w: 1.0,
            s_exponent: 1.2,
            eps_w: 1e-4,
            recon_w: 1.0,
            color_w: 0.5,
            illum_smooth_w: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.alpha_w,
            self.beta_w,
            self.gamma_w,
            self.s_exponent,
            self.eps_w,
            self.recon_w,
            self.color_w,
            self.illum_smooth_w,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(crate::Error::InvalidArgument(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if self.eps_w <= 0.0 {
            return Err(crate::Error::InvalidArgument("eps_w must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample scalar loss with a hand-derived gradient.
pub trait SampleLoss<T: Real> {
    /// One value per batch entry.
    fn values(&self, x: &Tensor<T>) -> Vec<T>;
    /// `Σ_n upstream[n] · ∂values[n]/∂x`.
    fn gradient(&self, x: &Tensor<T>, upstream: &[T]) -> Tensor<T>;
}

impl<T: Real> Tape<T> {
    /// Record a [`SampleLoss`]; the result has shape `(N, 1, 1, 1)`.
    pub fn sample_loss<L: SampleLoss<T> + 'static>(&self, x: Var, loss: L) -> Var {
        let vx = self.value(x);
        let values = loss.values(&vx);
        let out = Tensor::from_vec([values.len(), 1, 1, 1], values);
        self.op(
            &[x],
            out,
            Box::new(move |g, _| vec![Some(loss.gradient(&vx, g.data()))]),
        )
    }
}

fn count<T: Real>(region: &BinaryMap) -> T {
    T::from_usize(region.count()).unwrap()
}

/// Mean of `(x − target)²` over the pixels of each sample's region and all
/// channels. An empty region contributes 0.
#[derive(Clone, Debug)]
pub struct MaskedMse<T> {
    pub target: Rc<Tensor<T>>,
    pub regions: Vec<BinaryMap>,
}

impl<T: Real> SampleLoss<T> for MaskedMse<T> {
    fn values(&self, x: &Tensor<T>) -> Vec<T> {
        assert_eq!(x.shape(), self.target.shape());
        let c = x.channels();
        (0..x.batch())
            .map(|n| {
                let region = &self.regions[n];
                let k = count::<T>(region);
                if k == T::zero() {
                    return T::zero();
                }
                let mut acc = T::zero();
                for ch in 0..c {
                    let xs = x.channel_plane(n, ch);
                    let ts = self.target.channel_plane(n, ch);
                    for (i, _) in region.data().iter().enumerate().filter(|(_, &m)| m) {
                        let d = xs[i] - ts[i];
                        acc += d * d;
                    }
                }
                acc / (k * T::from_usize(c).unwrap())
            })
            .collect()
    }

    fn gradient(&self, x: &Tensor<T>, upstream: &[T]) -> Tensor<T> {
        let c = x.channels();
        let mut g = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            let region = &self.regions[n];
            let k = count::<T>(region);
            if k == T::zero() {
                continue;
            }
            let scale = T::lit(2.0) * upstream[n] / (k * T::from_usize(c).unwrap());
            for ch in 0..c {
                let xs = x.channel_plane(n, ch).to_vec();
                let ts = self.target.channel_plane(n, ch);
                let gs = g.channel_plane_mut(n, ch);
                for (i, _) in region.data().iter().enumerate().filter(|(_, &m)| m) {
                    gs[i] = scale * (xs[i] - ts[i]);
                }
            }
        }
        g
    }
}

/// Mean over the region of `1 − cos(x_p, target_p)` between RGB vectors.
#[derive(Clone, Debug)]
pub struct ColorLoss<T> {
    pub target: Rc<Tensor<T>>,
    pub regions: Vec<BinaryMap>,
}

/// Keeps the cosine finite for black pixels.
const COS_DELTA: f64 = 1e-12;

impl<T: Real> SampleLoss<T> for ColorLoss<T> {
    fn values(&self, x: &Tensor<T>) -> Vec<T> {
        assert_eq!(x.shape(), self.target.shape());
        let c = x.channels();
        let delta = T::lit(COS_DELTA);
        (0..x.batch())
            .map(|n| {
                let region = &self.regions[n];
                let k = count::<T>(region);
                if k == T::zero() {
                    return T::zero();
                }
                let mut acc = T::zero();
                for (i, _) in region.data().iter().enumerate().filter(|(_, &m)| m) {
                    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                    for ch in 0..c {
                        let a = x.channel_plane(n, ch)[i];
                        let b = self.target.channel_plane(n, ch)[i];
                        dot += a * b;
                        na += a * a;
                        nb += b * b;
                    }
                    acc += T::one() - dot / (na * nb + delta).sqrt();
                }
                acc / k
            })
            .collect()
    }

    fn gradient(&self, x: &Tensor<T>, upstream: &[T]) -> Tensor<T> {
        let c = x.channels();
        let delta = T::lit(COS_DELTA);
        let mut g = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            let region = &self.regions[n];
            let k = count::<T>(region);
            if k == T::zero() {
                continue;
            }
            let scale = upstream[n] / k;
            for (i, _) in region.data().iter().enumerate().filter(|(_, &m)| m) {
                let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                for ch in 0..c {
                    let a = x.channel_plane(n, ch)[i];
                    let b = self.target.channel_plane(n, ch)[i];
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                let d = (na * nb + delta).sqrt();
                for ch in 0..c {
                    let a = x.channel_plane(n, ch)[i];
                    let b = self.target.channel_plane(n, ch)[i];
                    // ∂cos/∂a = b/D − dot·|b|²·a/D³
                    let dcos = b / d - dot * nb * a / (d * d * d);
                    let o = g.offset(n, ch, 0, 0) + i;
                    g.data_mut()[o] = -scale * dcos;
                }
            }
        }
        g
    }
}

/// `log(clamp(luma(I), 1/255, 1))` for each sample, shape `(N, 1, H, W)`.
pub fn log_luminance<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    assert_eq!(c, 3, "edge weights need an RGB input");
    let floor = T::lit(LOG_FLOOR);
    Tensor::from_fn([n, 1, h, w], |b, _, y, x| {
        let l = luminance(input.at(b, 0, y, x), input.at(b, 1, y, x), input.at(b, 2, y, x));
        l.max(floor).min(T::one()).ln()
    })
}

/// `(|stencil(log I)|^s + ε)^-1` per pixel, shape `(N, 1, H, W)`.
pub fn edge_weights<T: Real>(log_lum: &Tensor<T>, stencil: Stencil, s: f64, eps: f64) -> Tensor<T> {
    let [n, _, h, w] = log_lum.shape();
    let (s, eps) = (T::lit(s), T::lit(eps));
    let mut out = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        let d = stencil.map_plane(log_lum.channel_plane(b, 0), h, w);
        for (o, v) in out.channel_plane_mut(b, 0).iter_mut().zip(d) {
            *o = T::one() / (v.abs().powf(s) + eps);
        }
    }
    out
}

/// Weighted sum of squared stencil responses over a region:
/// `Σ_{p ∈ R} Σ_c Σ_k mult_k · ω_k(p) · (D_k x_c(p))²`, optionally divided
/// by `|R| · C`.
#[derive(Clone, Debug)]
pub struct WeightedStencilEnergy<T> {
    /// `(operator, multiplicity, weights of shape (N, 1, H, W))`.
    pub terms: Vec<(Stencil, f64, Rc<Tensor<T>>)>,
    pub regions: Vec<BinaryMap>,
    pub mean: bool,
}

impl<T: Real> WeightedStencilEnergy<T> {
    fn normalizer(&self, n: usize, channels: usize) -> T {
        if self.mean {
            count::<T>(&self.regions[n]) * T::from_usize(channels).unwrap()
        } else {
            T::one()
        }
    }
}

impl<T: Real> SampleLoss<T> for WeightedStencilEnergy<T> {
    fn values(&self, x: &Tensor<T>) -> Vec<T> {
        let [batch, c, h, w] = x.shape();
        (0..batch)
            .map(|n| {
                let region = &self.regions[n];
                let norm = self.normalizer(n, c);
                if norm == T::zero() || region.is_empty() {
                    return T::zero();
                }
                let mut acc = T::zero();
                for ch in 0..c {
                    let plane = x.channel_plane(n, ch);
                    for (stencil, mult, weights) in &self.terms {
                        let wp = weights.channel_plane(n, 0);
                        let mult = T::lit(*mult);
                        for y in 0..h {
                            for xx in 0..w {
                                let i = y * w + xx;
                                if region.data()[i] {
                                    let d = stencil.apply(plane, h, w, y, xx);
                                    acc += mult * wp[i] * d * d;
                                }
                            }
                        }
                    }
                }
                acc / norm
            })
            .collect()
    }

    fn gradient(&self, x: &Tensor<T>, upstream: &[T]) -> Tensor<T> {
        let [batch, c, h, w] = x.shape();
        let mut g = Tensor::zeros(x.shape());
        for n in 0..batch {
            let region = &self.regions[n];
            let norm = self.normalizer(n, c);
            if norm == T::zero() || region.is_empty() {
                continue;
            }
            let scale = T::lit(2.0) * upstream[n] / norm;
            for ch in 0..c {
                let plane = x.channel_plane(n, ch).to_vec();
                let gp = g.channel_plane_mut(n, ch);
                for (stencil, mult, weights) in &self.terms {
                    let wp = weights.channel_plane(n, 0);
                    let mult = T::lit(*mult);
                    for y in 0..h {
                        for xx in 0..w {
                            let i = y * w + xx;
                            if region.data()[i] {
                                let d = stencil.apply(&plane, h, w, y, xx);
                                stencil.scatter(gp, h, w, y, xx, scale * mult * wp[i] * d);
                            }
                        }
                    }
                }
            }
        }
        g
    }
}

/// Gradient-smooth loss: for each `p ∈ B`,
/// `Σ_{u,v ∈ {x,y}} ω^p_{u,v} (∂u∂v target)²` with
/// `ω^p_{u,v} = (|∂u∂v log I|^s + ε)^-1`, summed over B and channels.
pub fn gradient_smooth_term<T: Real>(
    input: &Tensor<T>,
    area_b: Vec<BinaryMap>,
    weights: &LossWeights,
) -> WeightedStencilEnergy<T> {
    let log_lum = log_luminance(input);
    let terms = SECOND_ORDER_DISTINCT
        .iter()
        .map(|&(stencil, mult)| {
            (
                stencil,
                mult,
                Rc::new(edge_weights(&log_lum, stencil, weights.s_exponent, weights.eps_w)),
            )
        })
        .collect();
    WeightedStencilEnergy {
        terms,
        regions: area_b,
        mean: false,
    }
}

/// First-order edge-aware smoothness of an illumination map, averaged over
/// the region: `Σ_u ω_u (∂u L)²` with `ω_u = (|∂u log I|^s + ε)^-1`.
pub fn illumination_smoothness_term<T: Real>(
    input: &Tensor<T>,
    regions: Vec<BinaryMap>,
    weights: &LossWeights,
) -> WeightedStencilEnergy<T> {
    let log_lum = log_luminance(input);
    let terms = [Stencil::DX, Stencil::DY]
        .into_iter()
        .map(|stencil| {
            (
                stencil,
                1.0,
                Rc::new(edge_weights(&log_lum, stencil, weights.s_exponent, weights.eps_w)),
            )
        })
        .collect();
    WeightedStencilEnergy {
        terms,
        regions,
        mean: true,
    }
}

fn areas(partitions: &[AreaPartition], pick: impl Fn(&AreaPartition) -> &BinaryMap) -> Vec<BinaryMap> {
    partitions.iter().map(|p| pick(p).clone()).collect()
}

/// Area-A loss per sample. `illumination` is `Some` for Retinex backbones.
pub fn loss_area_a<T: Real>(
    enhanced: &Tensor<T>,
    reference: &Tensor<T>,
    input: &Tensor<T>,
    partitions: &[AreaPartition],
    illumination: Option<&Tensor<T>>,
    weights: &LossWeights,
) -> Vec<T> {
    let regions = areas(partitions, |p| &p.area_a);
    let target = Rc::new(reference.clone());
    let recon = MaskedMse {
        target: Rc::clone(&target),
        regions: regions.clone(),
    }
    .values(enhanced);
    let color = ColorLoss {
        target,
        regions: regions.clone(),
    }
    .values(enhanced);
    let smooth = match illumination {
        Some(l) => illumination_smoothness_term(input, regions, weights).values(l),
        None => vec![T::zero(); enhanced.batch()],
    };
    (0..enhanced.batch())
        .map(|n| {
            T::lit(weights.recon_w) * recon[n]
                + T::lit(weights.color_w) * color[n]
                + T::lit(weights.illum_smooth_w) * smooth[n]
        })
        .collect()
}

/// Area-B loss per sample on `target_map` (illumination, or the output).
pub fn gradient_smooth_loss<T: Real>(
    target_map: &Tensor<T>,
    input: &Tensor<T>,
    area_b: &[BinaryMap],
    weights: &LossWeights,
) -> Vec<T> {
    gradient_smooth_term(input, area_b.to_vec(), weights).values(target_map)
}

/// Area-C loss per sample: mean squared distance to the dark input.
pub fn loss_area_c<T: Real>(enhanced: &Tensor<T>, input: &Tensor<T>, area_c: &[BinaryMap]) -> Vec<T> {
    MaskedMse {
        target: Rc::new(input.clone()),
        regions: area_c.to_vec(),
    }
    .values(enhanced)
}

/// Loss terms of one batch entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBreakdown {
    pub l_a: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub r_a: f64,
    pub r_b: f64,
    pub r_c: f64,
    pub total: f64,
}

/// Batch-averaged loss terms plus the per-sample detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub total: f64,
    pub samples: Vec<SampleBreakdown>,
}

/// Per-sample coefficients `weight / coverage`, zero where the area is empty.
pub fn coverage_coefficients(partitions: &[AreaPartition], weights: &LossWeights) -> [Vec<f64>; 3] {
    let coef = |w: f64, r: f64| if r > 0.0 { w / r } else { 0.0 };
    [
        partitions.iter().map(|p| coef(weights.alpha_w, p.r_a)).collect(),
        partitions.iter().map(|p| coef(weights.beta_w, p.r_b)).collect(),
        partitions.iter().map(|p| coef(weights.gamma_w, p.r_c)).collect(),
    ]
}

/// Combine per-sample terms into `α·L_A/r_a + β·L_B/r_b + γ·L_C/r_c`,
/// dropping terms whose area is empty, then average over the batch.
pub fn total_loss(
    l_a: &[f64],
    l_b: &[f64],
    l_c: &[f64],
    partitions: &[AreaPartition],
    weights: &LossWeights,
) -> LossBreakdown {
    let [ca, cb, cc] = coverage_coefficients(partitions, weights);
    let samples: Vec<SampleBreakdown> = partitions
        .iter()
        .enumerate()
        .map(|(n, p)| SampleBreakdown {
            l_a: l_a[n],
            l_b: l_b[n],
            l_c: l_c[n],
            r_a: p.r_a,
            r_b: p.r_b,
            r_c: p.r_c,
            total: ca[n] * l_a[n] + cb[n] * l_b[n] + cc[n] * l_c[n],
        })
        .collect();
    let mean = |f: fn(&SampleBreakdown) -> f64| {
        samples.iter().map(f).sum::<f64>() / samples.len().max(1) as f64
    };
    LossBreakdown {
        l_a: mean(|s| s.l_a),
        l_b: mean(|s| s.l_b),
        l_c: mean(|s| s.l_c),
        total: mean(|s| s.total),
        samples,
    }
}

/// Tape handles of a forward pass needed by the objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs {
    pub enhanced: Var,
    /// Illumination map for Retinex backbones, `None` for curve backbones.
    pub illumination: Option<Var>,
}

/// Build the full differentiable objective on `tape`.
pub fn region_objective<T: Real>(
    tape: &Tape<T>,
    vars: ObjectiveInputs,
    input: &Tensor<T>,
    reference: &Tensor<T>,
    partitions: &[AreaPartition],
    weights: &LossWeights,
) -> (Var, LossBreakdown) {
    let n = input.batch();
    assert_eq!(partitions.len(), n, "one partition per sample");
    let area_a = areas(partitions, |p| &p.area_a);
    let area_b = areas(partitions, |p| &p.area_b);
    let area_c = areas(partitions, |p| &p.area_c);
    let target = Rc::new(reference.clone());

    let recon = tape.sample_loss(
        vars.enhanced,
        MaskedMse {
            target: Rc::clone(&target),
            regions: area_a.clone(),
        },
    );
    let color = tape.sample_loss(
        vars.enhanced,
        ColorLoss {
            target,
            regions: area_a.clone(),
        },
    );
    let mut la = tape.add(
        tape.affine(recon, T::lit(weights.recon_w), T::zero()),
        tape.affine(color, T::lit(weights.color_w), T::zero()),
    );
    if let Some(l) = vars.illumination {
        let smooth = tape.sample_loss(l, illumination_smoothness_term(input, area_a, weights));
        la = tape.add(la, tape.affine(smooth, T::lit(weights.illum_smooth_w), T::zero()));
    }
    let b_target = vars.illumination.unwrap_or(vars.enhanced);
    let lb = tape.sample_loss(b_target, gradient_smooth_term(input, area_b, weights));
    let lc = tape.sample_loss(
        vars.enhanced,
        MaskedMse {
            target: Rc::new(input.clone()),
            regions: area_c,
        },
    );

    let [ca, cb, cc] = coverage_coefficients(partitions, weights);
    let batch = T::from_usize(n).unwrap();
    let scaled = |c: Vec<f64>| c.into_iter().map(|v| T::lit(v) / batch).collect::<Vec<T>>();
    let ta = tape.weighted_sum(la, scaled(ca));
    let tb = tape.weighted_sum(lb, scaled(cb));
    let tc = tape.weighted_sum(lc, scaled(cc));
    let total = tape.add(tape.add(ta, tb), tc);

    let to_f64 = |v: Var| -> Vec<f64> { tape.value(v).data().iter().map(|x| x.as_f64()).collect() };
    let breakdown = total_loss(&to_f64(la), &to_f64(lb), &to_f64(lc), partitions, weights);
    (total, breakdown)
}
