//! KAN convolution: every kernel tap is a learnable univariate function
//! `φ(x) = Σ_j c_j B_j(clamp(x, −1, 1)) + w_b · silu(x)` built from cubic
//! B-splines on a uniform grid of `G` intervals over `[−1, 1]`.

use super::conv::{out_size, silu, silu_grad, FeatureMap};
use crate::error::{Error, Result};

pub const SPLINE_ORDER: usize = 3;
pub const GRID_LO: f64 = -1.0;
pub const GRID_HI: f64 = 1.0;

/// Number of cubic B-spline basis functions for `grid` intervals.
pub fn basis_count(grid: usize) -> usize {
    grid + SPLINE_ORDER
}

/// Non-zero cubic B-spline bases at `x` (clamped to the grid range): the
/// index of the first one, their four values and their derivatives w.r.t.
/// `x` (zero outside the grid range, where the clamp is flat).
pub fn bspline_local(grid: usize, x: f64) -> (usize, [f64; 4], [f64; 4]) {
    let h = (GRID_HI - GRID_LO) / grid as f64;
    let inside = (GRID_LO..=GRID_HI).contains(&x);
    let xc = x.clamp(GRID_LO, GRID_HI);
    let s = (xc - GRID_LO) / h;
    let cell = (s.floor() as usize).min(grid - 1);
    let u = s - cell as f64;
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    let b = [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ];
    let db = if inside {
        [
            -v * v / 2.0 / h,
            (3.0 * u2 - 4.0 * u) / 2.0 / h,
            (-3.0 * u2 + 2.0 * u + 1.0) / 2.0 / h,
            u2 / 2.0 / h,
        ]
    } else {
        [0.0; 4]
    };
    (cell, b, db)
}

/// All `G + 3` basis values at `x`.
pub fn bspline_basis(grid: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; basis_count(grid)];
    let (first, b, _) = bspline_local(grid, x);
    out[first..first + 4].copy_from_slice(&b);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct KanConv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub grid: usize,
    /// `[out][in][3][3][G+3]`
    pub coeffs: Vec<f64>,
    /// `[out][in][3][3]`
    pub base: Vec<f64>,
}

impl KanConv2d {
    /// All-zero functions: the layer outputs zero everywhere.
    pub fn zeros(in_channels: usize, out_channels: usize, grid: usize) -> Self {
        let taps = out_channels * in_channels * 9;
        Self {
            in_channels,
            out_channels,
            grid,
            coeffs: vec![0.0; taps * basis_count(grid)],
            base: vec![0.0; taps],
        }
    }

    pub fn param_count(&self) -> usize {
        self.coeffs.len() + self.base.len()
    }

    #[inline]
    fn tap(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * 3 + ky) * 3 + kx
    }

    /// Evaluates one tap's function `φ` at `x`.
    pub fn phi(&self, tap: usize, x: f64) -> f64 {
        let nb = basis_count(self.grid);
        let (first, b, _) = bspline_local(self.grid, x);
        let c = &self.coeffs[tap * nb + first..tap * nb + first + 4];
        c.iter().zip(&b).map(|(c, b)| c * b).sum::<f64>() + self.base[tap] * silu(x)
    }

    /// Stride-1, zero-padded KAN convolution (padded inputs are the value 0
    /// fed through `φ`).
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "KAN convolution expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (oh, ow) = (out_size(input.height, 1), out_size(input.width, 1));
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..self.in_channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let v = input.padded(i, y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                acc += self.phi(self.tap(o, i, ky, kx), v);
                            }
                        }
                    }
                    *out.at_mut(o, y, x) = acc;
                }
            }
        }
        Ok(out)
    }

    /// Input gradient; parameter gradients (`coeffs` then `base`) are
    /// accumulated into `grad`.
    pub fn backward(&self, input: &FeatureMap, grad_out: &FeatureMap, grad: &mut [f64]) -> FeatureMap {
        let nb = basis_count(self.grid);
        let nc = self.coeffs.len();
        let mut grad_in = FeatureMap::zeros(input.channels, input.height, input.width);
        for o in 0..self.out_channels {
            for y in 0..grad_out.height {
                for x in 0..grad_out.width {
                    let g = grad_out.at(o, y, x);
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..self.in_channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                let v = input.padded(i, iy, ix);
                                let tap = self.tap(o, i, ky, kx);
                                let (first, b, db) = bspline_local(self.grid, v);
                                let mut dphi = self.base[tap] * silu_grad(v);
                                for k in 0..4 {
                                    let ci = tap * nb + first + k;
                                    grad[ci] += g * b[k];
                                    dphi += self.coeffs[ci] * db[k];
                                }
                                grad[nc + tap] += g * silu(v);
                                let inside = iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < input.height
                                    && (ix as usize) < input.width;
                                if inside {
                                    *grad_in.at_mut(i, iy as usize, ix as usize) += g * dphi;
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}
