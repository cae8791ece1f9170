//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Each node keeps
//! its value and a closure mapping the upstream gradient to gradients for
//! its parents. Tapes are single-use and single-threaded; model weights live
//! outside the tape and are bound as leaves for each pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the upstream gradient to one optional gradient per parent.
/// `needs[i]` tells whether parent `i` takes part in differentiation.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A leaf that gradients flow into (weights, or inputs under test).
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Record an operation with a hand-written backward rule.
    ///
    /// The result requires a gradient iff any parent does; when none does,
    /// the backward closure is dropped immediately.
    pub fn op(&self, parents: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        })
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.numel(),
            1,
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Interior gradients are not needed after propagation.
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(upstream);
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn reduce_to_channels<T: Real>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let [n, c, _, _] = g.shape();
    debug_assert_eq!(c, channels);
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let s: T = g.channel_plane(b, ch).iter().copied().sum();
            out.data_mut()[ch] += s;
        }
    }
    out
}

/// Elementwise and structural operations.
impl<T: Real> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.zip_map(&vb, |x, y| x + y);
        self.op(
            &[a, b],
            out,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.zip_map(&vb, |x, y| x - y);
        self.op(
            &[a, b],
            out,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.zip_map(&vb, |x, y| x * y);
        self.op(
            &[a, b],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&vb, |g, y| g * y)),
                    needs[1].then(|| g.zip_map(&va, |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.zip_map(&vb, |x, y| x / y);
        self.op(
            &[a, b],
            out,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.zip_map(&vb, |g, y| g / y));
                let gb = needs[1].then(|| {
                    let t = g.zip_map(&va, |g, x| g * x);
                    t.zip_map(&vb, |gx, y| -gx / (y * y))
                });
                vec![ga, gb]
            }),
        )
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.op(&[x], out, Box::new(move |g, _| vec![Some(g.map(|v| v * scale))]))
    }

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(|v| v.max(T::zero()));
        self.op(
            &[x],
            out,
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&vx, |g, v| if v > T::zero() { g } else { T::zero() }))]
            }),
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = Rc::new(self.value(x).map(|v| v.tanh()));
        let y = Rc::clone(&out);
        self.op(
            &[x],
            (*out).clone(),
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |g, y| g * (T::one() - y * y)))]),
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = Rc::new(self.value(x).map(|v| T::one() / (T::one() + (-v).exp())));
        let y = Rc::clone(&out);
        self.op(
            &[x],
            (*out).clone(),
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |g, y| g * y * (T::one() - y)))]),
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Var {
        let vx = self.value(x);
        let out = vx.map(|v| v.max(lo).min(hi));
        self.op(
            &[x],
            out,
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&vx, |g, v| {
                    if v >= lo && v <= hi {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x);
        let out = self.value(x).slice_channels(start, len);
        self.op(
            &[x],
            out,
            Box::new(move |g, _| {
                let [n, c, h, w] = shape;
                let mut full = Tensor::zeros(shape);
                let p = h * w;
                for b in 0..n {
                    let dst = (b * c + start) * p;
                    full.data_mut()[dst..dst + len * p].copy_from_slice(g.sample(b));
                }
                vec![Some(full)]
            }),
        )
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs);
        let widths: Vec<usize> = values.iter().map(|v| v.channels()).collect();
        self.op(
            parts,
            out,
            Box::new(move |g, needs| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let s = need.then(|| g.slice_channels(start, w));
                        start += w;
                        s
                    })
                    .collect()
            }),
        )
    }

    /// `x * scale[c]` with `scale` shaped `(1, C, 1, 1)`.
    pub fn mul_channel(&self, x: Var, scale: Var) -> Var {
        let vx = self.value(x);
        let vs = self.value(scale);
        let [n, c, _, _] = vx.shape();
        assert_eq!(vs.shape(), [1, c, 1, 1], "channel scale must be (1,C,1,1)");
        let mut out = (*vx).clone();
        for b in 0..n {
            for ch in 0..c {
                let s = vs.data()[ch];
                out.channel_plane_mut(b, ch).iter_mut().for_each(|v| *v *= s);
            }
        }
        self.op(
            &[x, scale],
            out,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = g.clone();
                    for b in 0..n {
                        for ch in 0..c {
                            let s = vs.data()[ch];
                            gx.channel_plane_mut(b, ch).iter_mut().for_each(|v| *v *= s);
                        }
                    }
                    gx
                });
                let gs = needs[1].then(|| reduce_to_channels(&g.zip_map(&vx, |g, x| g * x), c));
                vec![gx, gs]
            }),
        )
    }

    /// `x + shift[c]` with `shift` shaped `(1, C, 1, 1)`.
    pub fn add_channel(&self, x: Var, shift: Var) -> Var {
        let vx = self.value(x);
        let vs = self.value(shift);
        let [n, c, _, _] = vx.shape();
        assert_eq!(vs.shape(), [1, c, 1, 1], "channel shift must be (1,C,1,1)");
        let mut out = (*vx).clone();
        for b in 0..n {
            for ch in 0..c {
                let s = vs.data()[ch];
                out.channel_plane_mut(b, ch).iter_mut().for_each(|v| *v += s);
            }
        }
        self.op(
            &[x, shift],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| reduce_to_channels(g, c)),
                ]
            }),
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        let out = Tensor::scalar(vx.sum());
        self.op(
            &[x],
            out,
            Box::new(move |g, _| vec![Some(Tensor::full(shape, g.item()))]),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        let count = T::from_usize(vx.numel()).unwrap();
        let out = Tensor::scalar(vx.sum() / count);
        self.op(
            &[x],
            out,
            Box::new(move |g, _| vec![Some(Tensor::full(shape, g.item() / count))]),
        )
    }

    /// Scalar `Σ_i coeffs[i] * x[i]` for a per-sample vector `x` of shape
    /// `(N, 1, 1, 1)`.
    pub fn weighted_sum(&self, x: Var, coeffs: Vec<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.numel(), coeffs.len(), "one coefficient per entry");
        let shape = vx.shape();
        let total = vx
            .data()
            .iter()
            .zip(&coeffs)
            .map(|(&v, &c)| v * c)
            .sum::<T>();
        self.op(
            &[x],
            Tensor::scalar(total),
            Box::new(move |g, _| {
                let gi = g.item();
                vec![Some(Tensor::from_vec(
                    shape,
                    coeffs.iter().map(|&c| c * gi).collect(),
                ))]
            }),
        )
    }
}

pub mod gradcheck {
    //! Central finite differences against tape gradients, in `f64`.

    use super::*;

    /// Largest relative error `|a - n| / max(|a|, |n|, floor)` over all
    /// entries of `input`.
    pub fn max_rel_error(
        input: &Tensor<f64>,
        analytic: &Tensor<f64>,
        f: impl Fn(&Tensor<f64>) -> f64,
        step: f64,
        floor: f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data_mut()[i] += step;
            let mut minus = input.clone();
            minus.data_mut()[i] -= step;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        worst
    }
}
