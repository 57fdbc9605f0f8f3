//! Kolmogorov-Arnold layer: every input/output edge carries
//! `w_b * silu(x) + sum_k c_k B_k(x)` with cubic B-splines on a fixed
//! uniform grid.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Uniform knot grid over `[lo, hi]` split into `intervals` pieces, extended
/// by `order` knots on each side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineGrid {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
    pub order: usize,
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, intervals: usize, order: usize) -> Self {
        assert!(hi > lo && intervals > 0, "degenerate spline grid");
        SplineGrid {
            lo,
            hi,
            intervals,
            order,
        }
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    /// Number of basis functions (and coefficients per edge).
    pub fn num_basis(&self) -> usize {
        self.intervals + self.order
    }

    pub fn knot(&self, j: isize) -> f64 {
        self.lo + (j - self.order as isize) as f64 * self.spacing()
    }

    fn num_knots(&self) -> usize {
        self.intervals + 2 * self.order + 1
    }

    /// Knot span containing `x`, or `None` outside the extended knot range.
    fn span(&self, x: f64) -> Option<usize> {
        let t0 = self.knot(0);
        let last = self.knot(self.num_knots() as isize - 1);
        if !(x >= t0 && x < last) {
            return None;
        }
        let m = ((x - t0) / self.spacing()).floor() as usize;
        Some(m.min(self.num_knots() - 2))
    }

    /// Nonzero basis values of the given degree at `x` in span `m`:
    /// `out[i] = B_{m - degree + i, degree}(x)`.
    fn local(&self, x: f64, m: usize, degree: usize, out: &mut [f64]) {
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        out[0] = 1.0;
        for d in 1..=degree {
            left[d] = x - self.knot(m as isize + 1 - d as isize);
            right[d] = self.knot(m as isize + d as isize) - x;
            let mut saved = 0.0;
            for r in 0..d {
                let temp = out[r] / (right[r + 1] + left[d - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[d - r] * temp;
            }
            out[d] = saved;
        }
    }

    /// All `num_basis()` values at `x`; zero outside the knot range.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut all = vec![0.0; self.num_basis()];
        if let Some((first, vals, _)) = self.eval(x, false) {
            for (i, v) in vals.into_iter().enumerate() {
                let j = first + i as isize;
                if j >= 0 && (j as usize) < all.len() {
                    all[j as usize] = v;
                }
            }
        }
        all
    }

    /// Index of the first nonzero basis function, its `order + 1` values and
    /// (optionally) their derivatives.
    pub(crate) fn eval(&self, x: f64, with_deriv: bool) -> Option<(isize, Vec<f64>, Vec<f64>)> {
        let m = self.span(x)?;
        let p = self.order;
        let mut vals = vec![0.0; p + 1];
        self.local(x, m, p, &mut vals);
        let mut derivs = Vec::new();
        if with_deriv && p > 0 {
            let mut lower = vec![0.0; p];
            self.local(x, m, p - 1, &mut lower);
            let h = self.spacing();
            derivs = (0..=p)
                .map(|i| {
                    let a = if i >= 1 { lower[i - 1] } else { 0.0 };
                    let b = if i < p { lower[i] } else { 0.0 };
                    (a - b) / h
                })
                .collect();
        } else if with_deriv {
            derivs = vec![0.0];
        }
        Some((m as isize - p as isize, vals, derivs))
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub(crate) struct KanDims {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
}

pub(crate) fn kan_forward_kernel(
    x: &[f64],
    base: &[f64],
    coef: &[f64],
    dims: &KanDims,
    grid: &SplineGrid,
) -> Vec<f64> {
    let nb = grid.num_basis();
    let mut out = vec![0.0; dims.n * dims.d_out];
    for t in 0..dims.n {
        let orow = &mut out[t * dims.d_out..(t + 1) * dims.d_out];
        for i in 0..dims.d_in {
            let xv = x[t * dims.d_in + i];
            let s = silu(xv);
            for (j, o) in orow.iter_mut().enumerate() {
                *o += base[i * dims.d_out + j] * s;
            }
            if let Some((first, vals, _)) = grid.eval(xv, false) {
                for (q, bv) in vals.iter().enumerate() {
                    let k = first + q as isize;
                    if k < 0 || k as usize >= nb {
                        continue;
                    }
                    let k = k as usize;
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += coef[(i * dims.d_out + j) * nb + k] * bv;
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct KanGrads {
    pub x: Option<Vec<f64>>,
    pub base: Option<Vec<f64>>,
    pub coef: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn kan_backward_kernel(
    g: &[f64],
    x: &[f64],
    base: &[f64],
    coef: &[f64],
    dims: &KanDims,
    grid: &SplineGrid,
    need: (bool, bool, bool),
) -> KanGrads {
    let nb = grid.num_basis();
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gbase = need.1.then(|| vec![0.0; base.len()]);
    let mut gcoef = need.2.then(|| vec![0.0; coef.len()]);
    for t in 0..dims.n {
        let grow = &g[t * dims.d_out..(t + 1) * dims.d_out];
        for i in 0..dims.d_in {
            let xv = x[t * dims.d_in + i];
            let s = silu(xv);
            let ds = silu_grad(xv);
            let mut dx = 0.0;
            for (j, gv) in grow.iter().enumerate() {
                dx += gv * base[i * dims.d_out + j] * ds;
                if let Some(gb) = gbase.as_mut() {
                    gb[i * dims.d_out + j] += gv * s;
                }
            }
            if let Some((first, vals, derivs)) = grid.eval(xv, true) {
                for q in 0..vals.len() {
                    let k = first + q as isize;
                    if k < 0 || k as usize >= nb {
                        continue;
                    }
                    let k = k as usize;
                    for (j, gv) in grow.iter().enumerate() {
                        let ci = (i * dims.d_out + j) * nb + k;
                        dx += gv * coef[ci] * derivs[q];
                        if let Some(gc) = gcoef.as_mut() {
                            gc[ci] += gv * vals[q];
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                gx[t * dims.d_in + i] = dx;
            }
        }
    }
    KanGrads {
        x: gx,
        base: gbase,
        coef: gcoef,
    }
}

/// One KAN layer's parameters.
#[derive(Clone, Debug)]
pub struct KanLayer {
    pub grid: SplineGrid,
    /// `d_in x d_out` weights of the silu base path.
    pub base: Tensor,
    /// `d_in x d_out x num_basis` spline coefficients.
    pub coef: Tensor,
}

impl KanLayer {
    /// Base weights fan-in uniform, spline coefficients N(0, 0.01^2).
    pub fn init(d_in: usize, d_out: usize, grid: SplineGrid, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let base = Tensor::from_fn(&[d_in, d_out], |_| uni.sample(rng));
        let coef = Tensor::from_fn(&[d_in, d_out, grid.num_basis()], |_| normal.sample(rng));
        KanLayer { grid, base, coef }
    }

    pub fn zeros(d_in: usize, d_out: usize, grid: SplineGrid) -> Self {
        KanLayer {
            grid,
            base: Tensor::zeros(&[d_in, d_out]),
            coef: Tensor::zeros(&[d_in, d_out, grid.num_basis()]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.base.shape()[1]
    }

    /// Binds the parameters as leaves and applies the layer to `N x d_in` tokens.
    /// Returns the output together with the (base, coef) leaf handles.
    pub fn forward(&self, tape: &mut Tape, tokens: Var) -> Result<(Var, Var, Var)> {
        let base = tape.leaf(self.base.clone());
        let coef = tape.leaf(self.coef.clone());
        let out = tape.kan(tokens, base, coef, self.grid)?;
        Ok((out, base, coef))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SplineGrid {
        SplineGrid::new(-3.0, 3.0, 8, 3)
    }

    #[test]
    fn partition_of_unity_inside_grid() {
        let g = grid();
        for i in 1..600 {
            let x = -3.0 + i as f64 * 0.01;
            let total: f64 = g.basis(x).iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "x = {x}: {total}");
        }
    }

    #[test]
    fn basis_vanishes_outside_extended_knots() {
        let g = grid();
        assert!(g.basis(-6.0).iter().all(|&v| v == 0.0));
        assert!(g.basis(5.26).iter().all(|&v| v == 0.0));
        assert!(g.basis(0.3).iter().all(|&v| v >= 0.0));
    }

    /// Cox-de Boor recursion over every basis function, straight from the
    /// definition.
    fn recursive(g: &SplineGrid, j: usize, p: usize, x: f64) -> f64 {
        let t = |i: usize| g.knot(i as isize);
        if p == 0 {
            return if t(j) <= x && x < t(j + 1) { 1.0 } else { 0.0 };
        }
        let a = (x - t(j)) / (t(j + p) - t(j)) * recursive(g, j, p - 1, x);
        let b = (t(j + p + 1) - x) / (t(j + p + 1) - t(j + 1)) * recursive(g, j + 1, p - 1, x);
        a + b
    }

    #[test]
    fn local_evaluation_matches_recursive_definition() {
        let g = grid();
        for i in 0..200 {
            let x = -5.2 + i as f64 * 0.052;
            let fast = g.basis(x);
            for (j, v) in fast.iter().enumerate() {
                assert!((v - recursive(&g, j, 3, x)).abs() < 1e-12, "x={x} j={j}");
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let g = grid();
        for i in 0..50 {
            let x = -2.9 + i as f64 * 0.117;
            let (first, _, d) = g.eval(x, true).unwrap();
            let h = 1e-6;
            let up = g.basis(x + h);
            let dn = g.basis(x - h);
            for (q, dv) in d.iter().enumerate() {
                let k = first + q as isize;
                if k < 0 || k as usize >= g.num_basis() {
                    continue;
                }
                let fd = (up[k as usize] - dn[k as usize]) / (2.0 * h);
                assert!((fd - dv).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_layer_outputs_zero() {
        let layer = KanLayer::zeros(3, 2, grid());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[5, 3], |i| i as f64 * 0.3 - 2.0));
        let (out, _, _) = layer.forward(&mut tape, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out).shape(), &[5, 2]);
    }

    /// Solves the collocation system sum_k c_k B_k(x_i) = f(x_i) at
    /// `num_basis` points with Gaussian elimination.
    fn interpolate(g: &SplineGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = g.num_basis();
        let xs: Vec<f64> = (0..n)
            .map(|i| g.lo + (g.hi - g.lo) * (i as f64 + 0.5) / n as f64)
            .collect();
        let mut a: Vec<Vec<f64>> = xs
            .iter()
            .map(|&x| {
                let mut row = g.basis(x);
                row.push(f(x));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let fct = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= fct * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn spline_interpolates_identity() {
        let g = grid();
        let coef = interpolate(&g, |x| x);
        let layer = KanLayer {
            grid: g,
            base: Tensor::zeros(&[1, 1]),
            coef: Tensor::new(&[1, 1, g.num_basis()], coef).unwrap(),
        };
        let xs: Vec<f64> = (0..121).map(|i| -2.97 + i as f64 * 0.0495).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[xs.len(), 1], xs.clone()).unwrap());
        let (out, _, _) = layer.forward(&mut tape, x).unwrap();
        for (o, x) in tape.value(out).data().iter().zip(&xs) {
            assert!((o - x).abs() <= 1e-3, "{o} vs {x}");
        }
    }
}
