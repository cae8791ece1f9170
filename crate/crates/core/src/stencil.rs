//! Finite-difference stencils on single planes with replicate borders.

use crate::tensor::Real;

/// Derivative operator given as `(dy, dx, coefficient)` taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `f(x+1) − f(x)`
    DX,
    /// `f(y+1) − f(y)`
    DY,
    /// `f(x+1) − 2f(x) + f(x−1)`
    DXX,
    /// `f(y+1) − 2f(y) + f(y−1)`
    DYY,
    /// Central cross difference, `∂x∂y = ∂y∂x`.
    DXY,
}

const DX_TAPS: [(isize, isize, f64); 2] = [(0, 1, 1.0), (0, 0, -1.0)];
const DY_TAPS: [(isize, isize, f64); 2] = [(1, 0, 1.0), (0, 0, -1.0)];
const DXX_TAPS: [(isize, isize, f64); 3] = [(0, 1, 1.0), (0, 0, -2.0), (0, -1, 1.0)];
const DYY_TAPS: [(isize, isize, f64); 3] = [(1, 0, 1.0), (0, 0, -2.0), (-1, 0, 1.0)];
const DXY_TAPS: [(isize, isize, f64); 4] = [
    (1, 1, 0.25),
    (1, -1, -0.25),
    (-1, 1, -0.25),
    (-1, -1, 0.25),
];

/// The four `(u, v) ∈ {x, y}²` second-order terms. The mixed operator
/// appears twice because `∂x∂y` and `∂y∂x` coincide on a grid.
pub const SECOND_ORDER_TERMS: [Stencil; 4] = [Stencil::DXX, Stencil::DXY, Stencil::DXY, Stencil::DYY];

/// Distinct second-order operators with their multiplicity in
/// [`SECOND_ORDER_TERMS`].
pub const SECOND_ORDER_DISTINCT: [(Stencil, f64); 3] =
    [(Stencil::DXX, 1.0), (Stencil::DXY, 2.0), (Stencil::DYY, 1.0)];

impl Stencil {
    pub fn taps(self) -> &'static [(isize, isize, f64)] {
        match self {
            Stencil::DX => &DX_TAPS,
            Stencil::DY => &DY_TAPS,
            Stencil::DXX => &DXX_TAPS,
            Stencil::DYY => &DYY_TAPS,
            Stencil::DXY => &DXY_TAPS,
        }
    }

    #[inline]
    fn index(y: usize, x: usize, dy: isize, dx: isize, h: usize, w: usize) -> usize {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        sy * w + sx
    }

    /// Apply at `(y, x)` of a row-major `h × w` plane.
    #[inline]
    pub fn apply<T: Real>(self, plane: &[T], h: usize, w: usize, y: usize, x: usize) -> T {
        self.taps().iter().fold(T::zero(), |acc, &(dy, dx, c)| {
            acc + T::lit(c) * plane[Self::index(y, x, dy, dx, h, w)]
        })
    }

    /// Add `scale · ∂(stencil at (y, x))/∂plane` into `grad`.
    #[inline]
    pub fn scatter<T: Real>(self, grad: &mut [T], h: usize, w: usize, y: usize, x: usize, scale: T) {
        for &(dy, dx, c) in self.taps() {
            grad[Self::index(y, x, dy, dx, h, w)] += T::lit(c) * scale;
        }
    }

    /// The stencil evaluated at every pixel.
    pub fn map_plane<T: Real>(self, plane: &[T], h: usize, w: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(self.apply(plane, h, w, y, x));
            }
        }
        out
    }
}

/// ITU-R BT.601 luma of an RGB pixel.
#[inline]
pub fn luminance<T: Real>(r: T, g: T, b: T) -> T {
    T::lit(0.299) * r + T::lit(0.587) * g + T::lit(0.114) * b
}
