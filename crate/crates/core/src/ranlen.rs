//! Region-aware normalization.
//!
//! Activations are normalized per channel, then modulated by a scale and a
//! bias that vary per pixel and are predicted from the region mask:
//!
//! ```text
//! out[n,c,y,x] = gamma[n,c,y,x] · (h[n,c,y,x] − μ[n,c]) / (σ[n,c] + ε) + beta[n,c,y,x]
//! ```
//!
//! `gamma` and `beta` come from a two-layer CNN over the (resized) mask:
//! a shared `2 → hidden` conv with ReLU, then two heads emitting `Δγ` and
//! `β`. The heads start at zero and `gamma = 1 + Δγ`, so a fresh layer
//! behaves exactly like plain normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Conv2dLayer, Init, ParamStore};
use crate::tensor::{Real, Tensor};

/// Added to σ in the normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

/// Scope of the normalization statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// μ, σ per (sample, channel) over spatial positions.
    #[default]
    PerSample,
    /// μ, σ per channel over the batch and spatial positions.
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RanlenLayerConfig {
    pub in_channels: usize,
    pub mask_embed_width: usize,
    pub kernel_size: usize,
}

impl RanlenLayerConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            mask_embed_width: 32,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mask_embed_width == 0 {
            return Err(Error::InvalidArgument(
                "RANLEN widths must be at least 1".into(),
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "RANLEN kernel must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Radius, in pixels, over which one mask pixel can affect γ and β.
    pub fn receptive_radius(&self) -> usize {
        2 * (self.kernel_size / 2)
    }
}

/// Per-pixel modulation predicted from a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationField<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Nearest-neighbour resize of an `(N, C, H, W)` tensor.
pub fn resize_nearest<T: Real>(t: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    if (h, w) == (height, width) {
        return t.clone();
    }
    Tensor::from_fn([n, c, height, width], |b, ch, y, x| {
        let sy = ((y * h) / height).min(h - 1);
        let sx = ((x * w) / width).min(w - 1);
        t.at(b, ch, sy, sx)
    })
}

/// Per-group mean and σ (population) of `h`, one entry per group.
fn group_stats<T: Real>(h: &Tensor<T>, mode: StatsMode) -> (Vec<T>, Vec<T>) {
    let [n, c, _, _] = h.shape();
    let groups = group_slices(n, c, mode);
    let mut means = Vec::with_capacity(groups.len());
    let mut stds = Vec::with_capacity(groups.len());
    for members in &groups {
        let count = T::from_usize(members.len() * h.plane()).unwrap();
        let sum: T = members
            .iter()
            .map(|&(b, ch)| h.channel_plane(b, ch).iter().copied().sum::<T>())
            .sum();
        let mean = sum / count;
        let var: T = members
            .iter()
            .map(|&(b, ch)| {
                h.channel_plane(b, ch)
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
            })
            .sum::<T>()
            / count;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// `(sample, channel)` planes belonging to each statistics group.
fn group_slices(n: usize, c: usize, mode: StatsMode) -> Vec<Vec<(usize, usize)>> {
    match mode {
        StatsMode::PerSample => (0..n)
            .flat_map(|b| (0..c).map(move |ch| vec![(b, ch)]))
            .collect(),
        StatsMode::Batch => (0..c).map(|ch| (0..n).map(|b| (b, ch)).collect()).collect(),
    }
}

/// `(h − μ) / (σ + ε)` with statistics per `mode`.
pub fn normalize<T: Real>(h: &Tensor<T>, mode: StatsMode) -> Tensor<T> {
    let [n, c, _, _] = h.shape();
    let (means, stds) = group_stats(h, mode);
    let eps = T::lit(NORM_EPS);
    let mut out = h.clone();
    for (g, members) in group_slices(n, c, mode).iter().enumerate() {
        let denom = stds[g] + eps;
        for &(b, ch) in members {
            out.channel_plane_mut(b, ch)
                .iter_mut()
                .for_each(|v| *v = (*v - means[g]) / denom);
        }
    }
    out
}

impl<T: Real> Tape<T> {
    /// Differentiable [`normalize`].
    pub fn normalize(&self, h: Var, mode: StatsMode) -> Var {
        let vh = self.value(h);
        let out = normalize(&vh, mode);
        self.op(
            &[h],
            out,
            Box::new(move |g, _| {
                let [n, c, _, _] = vh.shape();
                let (means, stds) = group_stats(&vh, mode);
                let eps = T::lit(NORM_EPS);
                let mut dh = Tensor::zeros(vh.shape());
                for (gi, members) in group_slices(n, c, mode).iter().enumerate() {
                    let count = T::from_usize(members.len() * vh.plane()).unwrap();
                    let (mean, sd) = (means[gi], stds[gi]);
                    let s = sd + eps;
                    // ḡ and Σ g·d over the group.
                    let mut g_sum = T::zero();
                    let mut gd_sum = T::zero();
                    for &(b, ch) in members {
                        for (&gv, &hv) in g.channel_plane(b, ch).iter().zip(vh.channel_plane(b, ch)) {
                            g_sum += gv;
                            gd_sum += gv * (hv - mean);
                        }
                    }
                    let g_mean = g_sum / count;
                    // ∂σ/∂h_i = d_i / (N σ); undefined at σ = 0 where d ≡ 0.
                    let k = if sd > T::zero() {
                        gd_sum / (s * s * count * sd)
                    } else {
                        T::zero()
                    };
                    for &(b, ch) in members {
                        let src_g = g.channel_plane(b, ch);
                        let src_h = vh.channel_plane(b, ch);
                        let dst = dh.channel_plane_mut(b, ch);
                        for i in 0..dst.len() {
                            let d = src_h[i] - mean;
                            dst[i] = (src_g[i] - g_mean) / s - k * d;
                        }
                    }
                }
                vec![Some(dh)]
            }),
        )
    }
}

/// A normalization site conditioned on the region mask.
#[derive(Clone, Debug)]
pub struct RanlenLayer {
    pub config: RanlenLayerConfig,
    pub shared: Conv2dLayer,
    pub gamma_head: Conv2dLayer,
    pub beta_head: Conv2dLayer,
}

impl RanlenLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: RanlenLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let hidden = config.mask_embed_width;
        let c = config.in_channels;
        let pad = Padding::Replicate;
        Ok(Self {
            config,
            shared: Conv2dLayer::new(store, &format!("{name}.mask_embed"), 2, hidden, k, pad, Init::He, rng),
            gamma_head: Conv2dLayer::new(store, &format!("{name}.gamma"), hidden, c, k, pad, Init::Zeros, rng),
            beta_head: Conv2dLayer::new(store, &format!("{name}.beta"), hidden, c, k, pad, Init::Zeros, rng),
        })
    }

    /// Predict `(gamma, beta)` for an activation of spatial size
    /// `target_hw`. `mask` is a `(N, 2, H, W)` tensor of zeros and ones.
    pub fn embed_mask<T: Real>(
        &self,
        tape: &Tape<T>,
        params: &BoundParams,
        mask: &Tensor<T>,
        target_hw: (usize, usize),
    ) -> (Var, Var) {
        let resized = resize_nearest(mask, target_hw.0, target_hw.1);
        let m = tape.constant(resized);
        let e = self.shared.forward(tape, params, m);
        let e = tape.relu(e);
        let dgamma = self.gamma_head.forward(tape, params, e);
        let gamma = tape.affine(dgamma, T::one(), T::one());
        let beta = self.beta_head.forward(tape, params, e);
        (gamma, beta)
    }

    /// `gamma ⊙ normalize(h) + beta`.
    pub fn apply<T: Real>(
        tape: &Tape<T>,
        activation: Var,
        gamma: Var,
        beta: Var,
        mode: StatsMode,
    ) -> Var {
        assert_eq!(tape.shape(activation), tape.shape(gamma), "gamma must match the activation shape");
        assert_eq!(tape.shape(activation), tape.shape(beta), "beta must match the activation shape");
        let normed = tape.normalize(activation, mode);
        let scaled = tape.mul(normed, gamma);
        tape.add(scaled, beta)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        params: &BoundParams,
        activation: Var,
        mask: &Tensor<T>,
        mode: StatsMode,
    ) -> Var {
        let [_, _, h, w] = tape.shape(activation);
        let (gamma, beta) = self.embed_mask(tape, params, mask, (h, w));
        Self::apply(tape, activation, gamma, beta, mode)
    }

    /// Evaluate the modulation field without recording gradients.
    pub fn modulation_field<T: Real>(
        &self,
        store: &ParamStore<T>,
        mask: &Tensor<T>,
        target_hw: (usize, usize),
    ) -> ModulationField<T> {
        let tape = Tape::new();
        let params = store.bind(&tape, false);
        let (gamma, beta) = self.embed_mask(&tape, &params, mask, target_hw);
        ModulationField {
            gamma: (*tape.value(gamma)).clone(),
            beta: (*tape.value(beta)).clone(),
        }
    }
}

/// Apply a precomputed field: `gamma ⊙ normalize(h) + beta`.
pub fn apply_field<T: Real>(
    activation: &Tensor<T>,
    field: &ModulationField<T>,
    mode: StatsMode,
) -> Result<Tensor<T>> {
    if field.gamma.shape() != activation.shape() || field.beta.shape() != activation.shape() {
        return Err(Error::Shape(format!(
            "modulation field {:?}/{:?} does not match activation {:?}",
            field.gamma.shape(),
            field.beta.shape(),
            activation.shape()
        )));
    }
    let n = normalize(activation, mode);
    let scaled = n.zip_map(&field.gamma, |a, g| a * g);
    Ok(scaled.zip_map(&field.beta, |a, b| a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::masks::sample_circle;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn random_tensor(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(lo, hi).unwrap();
        Tensor::from_fn(shape, |_, _, _, _| u.sample(&mut rng))
    }

    fn randomize_heads(store: &mut ParamStore<f64>, layer: &RanlenLayer, seed: u64) {
        for (i, id) in [
            layer.gamma_head.weight,
            layer.gamma_head.bias.unwrap(),
            layer.beta_head.weight,
            layer.beta_head.bias.unwrap(),
        ]
        .into_iter()
        .enumerate()
        {
            let shape = store.get(id).shape();
            *store.get_mut(id) = random_tensor(shape, seed + i as u64, -0.2, 0.2);
        }
    }

    /// Scalar reference for `gamma · (h − μ)/(σ + ε) + beta` with per-sample
    /// statistics, written as explicit loops.
    fn reference_apply(h: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, hh, ww] = h.shape();
        let mut out = Tensor::zeros(h.shape());
        for b in 0..n {
            for ch in 0..c {
                let mut sum = 0.0;
                for y in 0..hh {
                    for x in 0..ww {
                        sum += h.at(b, ch, y, x);
                    }
                }
                let mean = sum / (hh * ww) as f64;
                let mut sq = 0.0;
                for y in 0..hh {
                    for x in 0..ww {
                        sq += (h.at(b, ch, y, x) - mean).powi(2);
                    }
                }
                let sd = (sq / (hh * ww) as f64).sqrt();
                for y in 0..hh {
                    for x in 0..ww {
                        let v = gamma.at(b, ch, y, x) * (h.at(b, ch, y, x) - mean) / (sd + 1e-5)
                            + beta.at(b, ch, y, x);
                        out.set(b, ch, y, x, v);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_field_is_plain_normalization() {
        let h = random_tensor([2, 3, 5, 5], 1, -2.0, 3.0);
        let field = ModulationField {
            gamma: Tensor::full(h.shape(), 1.0),
            beta: Tensor::zeros(h.shape()),
        };
        let out = apply_field(&h, &field, StatsMode::PerSample).unwrap();
        assert_eq!(out, normalize(&h, StatsMode::PerSample));
        for b in 0..2 {
            for c in 0..3 {
                let p = out.channel_plane(b, c);
                let mean = p.iter().sum::<f64>() / 25.0;
                let sd = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0).sqrt();
                assert!(mean.abs() < 1e-4);
                assert!((sd - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn constant_channel_yields_beta() {
        let h = Tensor::<f64>::full([1, 2, 4, 4], 3.5);
        let field = ModulationField {
            gamma: random_tensor([1, 2, 4, 4], 2, 0.5, 1.5),
            beta: random_tensor([1, 2, 4, 4], 3, -1.0, 1.0),
        };
        let out = apply_field(&h, &field, StatsMode::PerSample).unwrap();
        assert_eq!(out, field.beta);
    }

    #[test]
    fn matches_scalar_reference() {
        let h = random_tensor([1, 4, 5, 5], 4, -1.0, 1.0);
        let field = ModulationField {
            gamma: random_tensor([1, 4, 5, 5], 5, 0.0, 2.0),
            beta: random_tensor([1, 4, 5, 5], 6, -1.0, 1.0),
        };
        let fast = apply_field(&h, &field, StatsMode::PerSample).unwrap();
        let slow = reference_apply(&h, &field.gamma, &field.beta);
        assert!(fast.max_abs_diff(&slow) < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let h = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let field = ModulationField {
            gamma: Tensor::zeros([1, 2, 4, 5]),
            beta: Tensor::zeros([1, 2, 4, 5]),
        };
        assert!(apply_field(&h, &field, StatsMode::PerSample).is_err());
    }

    #[test]
    fn fresh_layer_is_identity_modulation() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = RanlenLayer::new(&mut store, "r", RanlenLayerConfig::new(4), &mut rng).unwrap();
        let (mask, _) = sample_circle(12, 12, 1).unwrap();
        let field = layer.modulation_field(&store, &mask.to_tensor(), (12, 12));
        assert!(field.gamma.data().iter().all(|&g| g == 1.0));
        assert!(field.beta.data().iter().all(|&b| b == 0.0));

        let h = random_tensor([1, 4, 12, 12], 8, -1.0, 1.0);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let hv = tape.constant(h.clone());
        let out = layer.forward(&tape, &p, hv, &mask.to_tensor(), StatsMode::PerSample);
        let plain = normalize(&h, StatsMode::PerSample);
        assert!(tape.value(out).max_abs_diff(&plain) <= 1e-6);
    }

    #[test]
    fn constant_mask_gives_constant_field() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = RanlenLayer::new(&mut store, "r", RanlenLayerConfig::new(3), &mut rng).unwrap();
        randomize_heads(&mut store, &layer, 100);
        let mask = crate::masks::RegionMask::full(9, 7).to_tensor::<f64>();
        let field = layer.modulation_field(&store, &mask, (9, 7));
        for t in [&field.gamma, &field.beta] {
            for c in 0..3 {
                let p = t.channel_plane(0, c);
                assert!(p.iter().all(|&v| (v - p[0]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn mask_change_stays_within_receptive_field() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let config = RanlenLayerConfig::new(2);
        let layer = RanlenLayer::new(&mut store, "r", config, &mut rng).unwrap();
        randomize_heads(&mut store, &layer, 200);
        let (mask, _) = sample_circle(16, 16, 5).unwrap();
        let a = mask.to_tensor::<f64>();
        let mut b = a.clone();
        // Flip channel 1 at a corner pixel far from the circle.
        let (py, px) = (15, 15);
        let v = b.at(0, 1, py, px);
        b.set(0, 1, py, px, 1.0 - v);
        if b.at(0, 1, py, px) == 0.0 {
            b.set(0, 0, py, px, 0.0);
        }
        let fa = layer.modulation_field(&store, &a, (16, 16));
        let fb = layer.modulation_field(&store, &b, (16, 16));
        // Receptive radius is computed from the two stacked 3×3 kernels. With
        // replicate padding a border pixel is also read by taps that fall off
        // the image, which never extends the reach beyond that radius.
        let radius = config.receptive_radius();
        assert_eq!(radius, 2);
        let mut changed_inside = false;
        for y in 0..16 {
            for x in 0..16 {
                let far = (y as isize - py as isize).abs() > radius as isize
                    || (x as isize - px as isize).abs() > radius as isize;
                for c in 0..2 {
                    let dg = (fa.gamma.at(0, c, y, x) - fb.gamma.at(0, c, y, x)).abs();
                    let db = (fa.beta.at(0, c, y, x) - fb.beta.at(0, c, y, x)).abs();
                    if far {
                        assert_eq!(dg + db, 0.0, "change leaked to ({y},{x})");
                    } else if dg + db > 0.0 {
                        changed_inside = true;
                    }
                }
            }
        }
        assert!(changed_inside);
    }

    #[test]
    fn nearest_resize_keeps_binary_values() {
        let (mask, _) = sample_circle(32, 32, 2).unwrap();
        let small = resize_nearest(&mask.to_tensor::<f32>(), 8, 8);
        assert_eq!(small.shape(), [1, 2, 8, 8]);
        assert!(small.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(crate::masks::RegionMask::from_tensor(&small).is_ok());
    }

    #[test]
    fn batch_independence_per_sample_stats() {
        let h = random_tensor([3, 2, 5, 5], 11, -1.0, 1.0);
        let mut h2 = h.clone();
        h2.sample_mut(0).iter_mut().for_each(|v| *v = *v * 3.0 + 1.0);
        h2.sample_mut(2).iter_mut().for_each(|v| *v = -*v);
        let a = normalize(&h, StatsMode::PerSample);
        let b = normalize(&h2, StatsMode::PerSample);
        assert_eq!(a.sample(1), b.sample(1));
        // Batch statistics couple samples.
        let a = normalize(&h, StatsMode::Batch);
        let b = normalize(&h2, StatsMode::Batch);
        assert_ne!(a.sample(1), b.sample(1));
    }

    #[test]
    fn normalize_gradients_both_modes() {
        for mode in [StatsMode::PerSample, StatsMode::Batch] {
            let h = random_tensor([2, 3, 4, 4], 12, -1.0, 1.0);
            let up = random_tensor([2, 3, 4, 4], 13, -1.0, 1.0);
            let f = |t: &Tensor<f64>| normalize(t, mode).zip_map(&up, |a, b| a * b).sum();
            let tape = Tape::new();
            let hv = tape.param(h.clone());
            let n = tape.normalize(hv, mode);
            let u = tape.constant(up.clone());
            let nu = tape.mul(n, u);
            let l = tape.sum_all(nu);
            let g = tape.backward(l);
            let err = max_rel_error(&h, g.get(hv).unwrap(), f, 1e-6, 1e-6);
            assert!(err < 1e-6, "{mode:?}: {err}");
        }
    }

    #[test]
    fn constant_activation_gradient_is_finite() {
        let tape = Tape::<f64>::new();
        let hv = tape.param(Tensor::full([1, 1, 3, 3], 2.0));
        let n = tape.normalize(hv, StatsMode::PerSample);
        let l = tape.sum_all(n);
        let g = tape.backward(l);
        assert!(g.get(hv).unwrap().is_finite());
    }
}
