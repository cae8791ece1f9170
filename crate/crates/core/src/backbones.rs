//! Small enhancement networks with mask-conditioned normalization sites.
//!
//! These are stand-ins for larger published backbones: a plain conv encoder
//! feeding either a quadratic-curve head or a Retinex illumination head.
//! Neither downsamples, so output shape always equals input shape.
//!
//! A normalization site sits after the conv of each layer listed in
//! `ranlen_sites`. With `Conditioning::Ranlen` the site is a [`RanlenLayer`];
//! otherwise it is per-sample instance normalization with a learnable
//! per-channel affine starting at (1, 0). The two agree exactly until the
//! modulation heads move away from zero.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Conv2dLayer, Init, ParamId, ParamStore};
use crate::masks::RegionMask;
use crate::ranlen::{RanlenLayer, RanlenLayerConfig, StatsMode};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Curve,
    Retinex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Ranlen,
    /// Mask appended to the RGB input (5 input channels).
    Concat,
    None,
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::Curve => "curve",
            Backbone::Retinex => "retinex",
        })
    }
}

impl std::fmt::Display for Conditioning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conditioning::Ranlen => "ranlen",
            Conditioning::Concat => "concat",
            Conditioning::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub conditioning: Conditioning,
    pub width: usize,
    /// Number of conv layers in the encoder, head included.
    pub depth: usize,
    /// Hidden layer indices (`1..depth-1`) followed by a normalization site.
    pub ranlen_sites: Vec<usize>,
    pub curve_iterations: usize,
    pub ell_min: f64,
    pub mask_embed_width: usize,
    pub stats_mode: StatsMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Curve,
            conditioning: Conditioning::Ranlen,
            width: 32,
            depth: 6,
            ranlen_sites: vec![1, 3],
            curve_iterations: 4,
            ell_min: 0.01,
            mask_embed_width: 32,
            stats_mode: StatsMode::PerSample,
        }
    }
}

impl ModelConfig {
    pub fn input_channels(&self) -> usize {
        match self.conditioning {
            Conditioning::Concat => 5,
            _ => 3,
        }
    }

    pub fn head_channels(&self) -> usize {
        match self.backbone {
            Backbone::Curve => 3 * self.curve_iterations,
            Backbone::Retinex => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.width == 0 || self.mask_embed_width == 0 {
            return bad("width and mask_embed_width must be at least 1");
        }
        if self.depth < 2 {
            return bad("depth must be at least 2");
        }
        if self.conditioning == Conditioning::Ranlen && self.ranlen_sites.is_empty() {
            return bad("ranlen conditioning needs at least one site");
        }
        if let Some(&s) = self
            .ranlen_sites
            .iter()
            .find(|&&s| s >= self.depth - 1)
        {
            return bad(&format!(
                "site {s} is not a hidden layer (valid: 0..{})",
                self.depth - 1
            ));
        }
        let mut sorted = self.ranlen_sites.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.ranlen_sites.len() {
            return bad("ranlen_sites contains duplicates");
        }
        if self.backbone == Backbone::Curve && self.curve_iterations == 0 {
            return bad("curve_iterations must be at least 1");
        }
        if !(self.ell_min > 0.0 && self.ell_min < 1.0) {
            return bad("ell_min must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum NormSite {
    Ranlen(RanlenLayer),
    Instance { scale: ParamId, shift: ParamId },
}

/// Model structure; the weights live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    convs: Vec<Conv2dLayer>,
    sites: Vec<(usize, NormSite)>,
    refine: Conv2dLayer,
}

/// Intermediate map produced by the backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum Intermediate<T> {
    /// `(N, 3·iterations, H, W)` in `[-1, 1]`.
    Curve(Tensor<T>),
    /// `(N, 3, H, W)` in `[ell_min, 1]`.
    Illumination(Tensor<T>),
}

impl<T: Real> Intermediate<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        match self {
            Intermediate::Curve(t) | Intermediate::Illumination(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancementOutput<T> {
    pub enhanced: Tensor<T>,
    /// Backbone result before the refinement conv.
    pub pre_refinement: Tensor<T>,
    pub intermediate: Intermediate<T>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub enhanced: Var,
    pub pre_refinement: Var,
    /// Curve maps or illumination, matching the backbone.
    pub intermediate: Var,
}

impl ForwardVars {
    /// The illumination map for Retinex models.
    pub fn illumination(&self, backbone: Backbone) -> Option<Var> {
        (backbone == Backbone::Retinex).then_some(self.intermediate)
    }
}

/// Scale applied to the He init of the head so the initial curve/illumination
/// maps stay close to their neutral values.
const HEAD_INIT_SCALE: f64 = 0.1;

impl Model {
    /// Build the model and its freshly initialised weights.
    ///
    /// Encoder convs and the refinement conv are drawn first, so models that
    /// differ only in conditioning (other than concat) and share a seed get
    /// the same encoder weights.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Self::build(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    fn build<T: Real, R: Rng + ?Sized>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let pad = Padding::Replicate;
        let mut convs = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let cin = if i == 0 { config.input_channels() } else { config.width };
            let (cout, init) = if i + 1 == config.depth {
                (config.head_channels(), Init::ScaledHe(HEAD_INIT_SCALE))
            } else {
                (config.width, Init::He)
            };
            convs.push(Conv2dLayer::new(store, &format!("enc.{i}"), cin, cout, 3, pad, init, rng));
        }
        // No bias: an offset here would shift Area C as much as Area A.
        let refine = Conv2dLayer::new_unbiased(store, "refine", 3, 3, 3, pad, Init::Identity, rng);
        let mut sites = Vec::new();
        let mut ordered = config.ranlen_sites.clone();
        ordered.sort_unstable();
        for &i in &ordered {
            let site = match config.conditioning {
                Conditioning::Ranlen => {
                    let cfg = RanlenLayerConfig {
                        in_channels: config.width,
                        mask_embed_width: config.mask_embed_width,
                        kernel_size: 3,
                    };
                    NormSite::Ranlen(RanlenLayer::new(store, &format!("ranlen.{i}"), cfg, rng)?)
                }
                _ => NormSite::Instance {
                    scale: store.add(format!("norm.{i}.scale"), Tensor::full([1, config.width, 1, 1], T::one())),
                    shift: store.add(format!("norm.{i}.shift"), Tensor::zeros([1, config.width, 1, 1])),
                },
            };
            sites.push((i, site));
        }
        Ok(Self {
            config,
            convs,
            sites,
            refine,
        })
    }

    /// Rebuild the structure for `config` without meaningful weights, for
    /// loading a checkpoint.
    pub fn skeleton<T: Real>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        Self::new(config, 0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_inputs<T: Real>(&self, image: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = image.shape();
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
        }
        if mask.shape() != [n, 2, h, w] {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match image {:?}",
                mask.shape(),
                image.shape()
            )));
        }
        Ok(())
    }

    /// Record a forward pass. `image` is `(N, 3, H, W)`, `mask` `(N, 2, H, W)`.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        params: &BoundParams,
        image: Var,
        mask: &Tensor<T>,
    ) -> ForwardVars {
        let cfg = &self.config;
        let mut h = match cfg.conditioning {
            Conditioning::Concat => {
                let m = tape.constant(mask.clone());
                tape.concat_channels(&[image, m])
            }
            _ => image,
        };
        let last = cfg.depth - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, params, h);
            if i == last {
                break;
            }
            if let Some((_, site)) = self.sites.iter().find(|(s, _)| *s == i) {
                h = match site {
                    NormSite::Ranlen(layer) => layer.forward(tape, params, h, mask, cfg.stats_mode),
                    NormSite::Instance { scale, shift } => {
                        let n = tape.normalize(h, cfg.stats_mode);
                        let n = tape.mul_channel(n, params.var(*scale));
                        tape.add_channel(n, params.var(*shift))
                    }
                };
            }
            h = tape.relu(h);
        }
        let (pre, intermediate) = match cfg.backbone {
            Backbone::Curve => {
                let curves = tape.tanh(h);
                (apply_curves(tape, image, curves, cfg.curve_iterations), curves)
            }
            Backbone::Retinex => {
                let s = tape.sigmoid(h);
                let ell = T::lit(cfg.ell_min);
                let l = tape.affine(s, T::one() - ell, ell);
                (retinex_divide(tape, image, l), l)
            }
        };
        let enhanced = self.refine_var(tape, params, pre);
        ForwardVars {
            enhanced,
            pre_refinement: pre,
            intermediate,
        }
    }

    fn refine_var<T: Real>(&self, tape: &Tape<T>, params: &BoundParams, x: Var) -> Var {
        let r = self.refine.forward(tape, params, x);
        tape.clamp(r, T::zero(), T::one())
    }

    /// Inference without gradient bookkeeping.
    pub fn enhance<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<EnhancementOutput<T>> {
        self.check_inputs(image, mask)?;
        let tape = Tape::new();
        let params = store.bind(&tape, false);
        let x = tape.constant(image.clone());
        let out = self.forward(&tape, &params, x, mask);
        let intermediate = (*tape.value(out.intermediate)).clone();
        Ok(EnhancementOutput {
            enhanced: (*tape.value(out.enhanced)).clone(),
            pre_refinement: (*tape.value(out.pre_refinement)).clone(),
            intermediate: match self.config.backbone {
                Backbone::Curve => Intermediate::Curve(intermediate),
                Backbone::Retinex => Intermediate::Illumination(intermediate),
            },
        })
    }

    /// Apply the refinement conv and the final clamp.
    pub fn refinement_tail<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let tape = Tape::new();
        let params = store.bind(&tape, false);
        let v = tape.constant(x.clone());
        let out = self.refine_var(&tape, &params, v);
        (*tape.value(out)).clone()
    }

    /// Re-render `output` with the predicted map scaled by `alpha`; smaller
    /// values brighten. `alpha = 1` reproduces `output`.
    pub fn apply_degree<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        output: &EnhancementOutput<T>,
        alpha: f64,
    ) -> Result<EnhancementOutput<T>> {
        let pre = degree_pre_refinement(image, &output.intermediate, alpha)?;
        Ok(EnhancementOutput {
            enhanced: self.refinement_tail(store, &pre),
            pre_refinement: pre,
            intermediate: output.intermediate.clone(),
        })
    }
}

/// Enhance one 8-bit image under `mask` at light degree `alpha`.
pub fn enhance_rgb(
    model: &Model,
    store: &ParamStore<f32>,
    image: &image::RgbImage,
    mask: &RegionMask,
    alpha: f64,
) -> Result<image::RgbImage> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("degree must be positive, got {alpha}")));
    }
    let x = crate::data::rgb_to_tensor::<f32>(image);
    let out = model.enhance(store, &x, &mask.to_tensor())?;
    let out = if alpha == 1.0 { out } else { model.apply_degree(store, &x, &out, alpha)? };
    crate::data::tensor_to_rgb(&out.enhanced, 0)
}

/// `x ← x + c_i ⊙ x ⊙ (1 − x)` for each iteration's 3-channel slice of `curves`.
pub fn apply_curves<T: Real>(tape: &Tape<T>, image: Var, curves: Var, iterations: usize) -> Var {
    let mut x = image;
    for i in 0..iterations {
        let c = tape.slice_channels(curves, 3 * i, 3);
        let one_minus = tape.affine(x, -T::one(), T::one());
        let t = tape.mul(tape.mul(c, x), one_minus);
        x = tape.add(x, t);
    }
    x
}

/// `clamp(I / L, 0, 1)`.
pub fn retinex_divide<T: Real>(tape: &Tape<T>, image: Var, illumination: Var) -> Var {
    let q = tape.div(image, illumination);
    tape.clamp(q, T::zero(), T::one())
}

/// The backbone output before refinement with the map scaled by `alpha`:
/// `clamp(I / (α·L), 0, 1)` for illumination, the curve update with
/// `clamp(α·c, −1, 1)` for curves.
pub fn degree_pre_refinement<T: Real>(
    image: &Tensor<T>,
    intermediate: &Intermediate<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "degree must be positive and finite, got {alpha}"
        )));
    }
    let a = T::lit(alpha);
    let tape = Tape::new();
    let x = tape.constant(image.clone());
    let out = match intermediate {
        Intermediate::Curve(c) => {
            let iterations = c.channels() / 3;
            let scaled = tape.constant(c.map(|v| (a * v).max(-T::one()).min(T::one())));
            apply_curves(&tape, x, scaled, iterations)
        }
        Intermediate::Illumination(l) => {
            let scaled = tape.constant(l.map(|v| a * v));
            retinex_divide(&tape, x, scaled)
        }
    };
    let value = (*tape.value(out)).clone();
    Ok(value)
}
