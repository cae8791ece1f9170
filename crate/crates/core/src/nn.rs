//! Named parameters and the convolution layer built on them.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::conv::Padding;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, insertion-ordered collection of named weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, values converted to `U`.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Register every parameter on `tape`. With `trainable == false` they
    /// become constants and no gradient bookkeeping is recorded.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    /// He-normal weights scaled by a factor, zero bias.
    ScaledHe(f64),
    Zeros,
    /// Centre tap 1 on the channel diagonal, everything else 0.
    Identity,
}

/// 3×3 (or any odd size) same-size convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, in_channels, out_channels, kernel, padding, init, true, rng)
    }

    /// Same as [`Conv2dLayer::new`] but without a bias term.
    #[allow(clippy::too_many_arguments)]
    pub fn new_unbiased<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, in_channels, out_channels, kernel, padding, init, false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        init: Init,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let shape: Shape = [out_channels, in_channels, kernel, kernel];
        let weight = match init {
            Init::He | Init::ScaledHe(_) => {
                let scale = if let Init::ScaledHe(s) = init { s } else { 1.0 };
                let fan_in = (in_channels * kernel * kernel) as f64;
                let normal = Normal::new(0.0, scale * (2.0 / fan_in).sqrt()).unwrap();
                Tensor::from_fn(shape, |_, _, _, _| T::lit(normal.sample(rng)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Identity => {
                assert_eq!(in_channels, out_channels, "identity init needs cin == cout");
                let c = kernel / 2;
                Tensor::from_fn(shape, |o, i, y, x| {
                    if o == i && y == c && x == c {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
        };
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1]))),
            in_channels,
            out_channels,
            kernel,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, params: &BoundParams, x: Var) -> Var {
        tape.conv2d(
            x,
            params.var(self.weight),
            self.bias.map(|b| params.var(b)),
            self.padding,
        )
    }
}
