//! Same-size 2-D convolution (stride 1, odd square kernels) via im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Border handling for the implicit `k / 2` padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Out-of-range taps read the nearest border pixel.
    #[default]
    Replicate,
    Zero,
}

#[inline]
fn tap(i: isize, len: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        match padding {
            Padding::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
            Padding::Zero => None,
        }
    }
}

/// Unfold one sample `(c, h, w)` into `(c·k·k, h·w)` columns.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, padding: Padding, col: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let Some(sy) = tap(y as isize + ky as isize - r, h, padding) else {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    };
                    let src = &plane[sy * w..(sy + 1) * w];
                    for (x, o) in out_row.iter_mut().enumerate() {
                        *o = match tap(x as isize + kx as isize - r, w, padding) {
                            Some(sx) => src[sx],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the sample.
fn col2im_add<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: Padding,
    dx: &mut [T],
) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let Some(sy) = tap(y as isize + ky as isize - r, h, padding) else {
                        continue;
                    };
                    for x in 0..w {
                        if let Some(sx) = tap(x as isize + kx as isize - r, w, padding) {
                            plane[sy * w + sx] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel<T: Real>(x: &Tensor<T>, weight: &Tensor<T>) -> (usize, usize, usize) {
    let [cout, cin, k, k2] = weight.shape();
    assert_eq!(k, k2, "square kernels only");
    assert!(k % 2 == 1, "odd kernels only");
    assert_eq!(x.channels(), cin, "conv input has {} channels, kernel expects {cin}", x.channels());
    (cout, cin, k)
}

/// Plain forward convolution. `bias` has shape `(1, cout, 1, 1)`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Tensor<T> {
    let (cout, cin, k) = check_kernel(x, weight);
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let ckk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut col = vec![T::zero(); ckk * hw];
    for b in 0..n {
        im2col(x.sample(b), cin, h, w, k, padding, &mut col);
        let dst = out.sample_mut(b);
        if let Some(bias) = bias {
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            cout,
            ckk,
            hw,
            T::one(),
            weight.data(),
            ckk as isize,
            1,
            &col,
            hw as isize,
            1,
            beta,
            dst,
            hw as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv2d`] for upstream gradient `g`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
    padding: Padding,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (cout, cin, k) = check_kernel(x, weight);
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let ckk = cin * k * k;
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    let mut col = vec![T::zero(); ckk * hw];
    for b in 0..n {
        let gs = g.sample(b);
        for (co, plane) in gs.chunks(hw).enumerate() {
            db.data_mut()[co] += plane.iter().copied().sum::<T>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(x.sample(b), cin, h, w, k, padding, &mut col);
            // dW += g · colᵀ
            T::gemm(
                cout,
                hw,
                ckk,
                T::one(),
                gs,
                hw as isize,
                1,
                &col,
                1,
                hw as isize,
                T::one(),
                dw.data_mut(),
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · g
            T::gemm(
                ckk,
                cout,
                hw,
                T::one(),
                weight.data(),
                1,
                ckk as isize,
                gs,
                hw as isize,
                1,
                T::zero(),
                &mut col,
                hw as isize,
                1,
            );
            col2im_add(&col, cin, h, w, k, padding, dx.sample_mut(b));
        }
    }
    (dx, dw, db)
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, padding: Padding) -> Var {
        let vx = self.value(x);
        let vw = self.value(weight);
        let vb = bias.map(|b| self.value(b));
        let out = conv2d(&vx, &vw, vb.as_deref(), padding);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.op(
            &parents,
            out,
            Box::new(move |g, needs| {
                let (dx, dw, db) = conv2d_backward(&vx, &vw, g, padding, needs[0], needs[1]);
                let mut grads = vec![dx, dw];
                if needs.len() > 2 {
                    grads.push(needs[2].then_some(db));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;

    fn lcg_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
        Tensor::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    /// Direct nested-loop convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, padding: Padding) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let r = (k / 2) as isize;
        Tensor::from_fn([n, cout, h, wd], |bn, co, y, xx| {
            let mut acc = b.data()[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - r;
                        let sx = xx as isize + kx as isize - r;
                        let v = match padding {
                            Padding::Replicate => x.at(
                                bn,
                                ci,
                                sy.clamp(0, h as isize - 1) as usize,
                                sx.clamp(0, wd as isize - 1) as usize,
                            ),
                            Padding::Zero => {
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    0.0
                                } else {
                                    x.at(bn, ci, sy as usize, sx as usize)
                                }
                            }
                        };
                        acc += v * w.at(co, ci, ky, kx);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn forward_matches_naive_loops() {
        for padding in [Padding::Replicate, Padding::Zero] {
            let x = lcg_tensor([2, 3, 5, 7], 1);
            let w = lcg_tensor([4, 3, 3, 3], 2);
            let b = lcg_tensor([1, 4, 1, 1], 3);
            let fast = conv2d(&x, &w, Some(&b), padding);
            assert!(fast.max_abs_diff(&naive(&x, &w, &b, padding)) < 1e-12);
        }
    }

    #[test]
    fn five_by_five_kernel_replicate() {
        let x = lcg_tensor([1, 2, 4, 4], 4);
        let w = lcg_tensor([3, 2, 5, 5], 5);
        let b = Tensor::zeros([1, 3, 1, 1]);
        let fast = conv2d(&x, &w, None, Padding::Replicate);
        assert!(fast.max_abs_diff(&naive(&x, &w, &b, Padding::Replicate)) < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for padding in [Padding::Replicate, Padding::Zero] {
            let x = lcg_tensor([2, 2, 4, 5], 7);
            let w = lcg_tensor([3, 2, 3, 3], 8);
            let b = lcg_tensor([1, 3, 1, 1], 9);
            let up = lcg_tensor([2, 3, 4, 5], 10);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                conv2d(x, w, Some(b), padding)
                    .zip_map(&up, |a, u| a * u)
                    .sum()
            };
            let tape = Tape::new();
            let vx = tape.param(x.clone());
            let vw = tape.param(w.clone());
            let vb = tape.param(b.clone());
            let y = tape.conv2d(vx, vw, Some(vb), padding);
            let u = tape.constant(up.clone());
            let yu = tape.mul(y, u);
            let l = tape.sum_all(yu);
            let g = tape.backward(l);
            assert!(max_rel_error(&x, g.get(vx).unwrap(), |t| loss(t, &w, &b), 1e-6, 1e-8) < 1e-7);
            assert!(max_rel_error(&w, g.get(vw).unwrap(), |t| loss(&x, t, &b), 1e-6, 1e-8) < 1e-7);
            assert!(max_rel_error(&b, g.get(vb).unwrap(), |t| loss(&x, &w, t), 1e-6, 1e-8) < 1e-7);
        }
    }

    #[test]
    fn constant_field_stays_constant_with_replicate_padding() {
        let x = Tensor::<f64>::full([1, 2, 6, 6], 0.7);
        let w = lcg_tensor([3, 2, 3, 3], 11);
        let y = conv2d(&x, &w, None, Padding::Replicate);
        for c in 0..3 {
            let p = y.channel_plane(0, c);
            assert!(p.iter().all(|&v| (v - p[0]).abs() < 1e-14));
        }
    }
}
