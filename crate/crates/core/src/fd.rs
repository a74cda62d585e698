//! Finite-difference stencils on uniform grids.
//!
//! Interior points use centered stencils of `2r + 1` points. Points closer
//! than `r` to an edge use one-sided stencils exact on polynomials of degree
//! `2r + 1`, so their formal order matches the centered ones. The one-sided
//! stencils are spread over `4r + 4` points and take the minimum-norm
//! weights among all exact ones, which keeps roundoff amplification small.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Fornberg's recursion for finite-difference weights.
///
/// Returns `c[k][j]`, the weight of node `x[j]` in the approximation of the
/// `k`-th derivative at `z`, for `k = 0..=max_order`.
pub fn fornberg_weights(z: f64, x: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] *= c4 / c3;
        }
        c1 = c2;
    }
    c
}

/// Minimum-norm weights for the `k`-th derivative at offset 0 from nodes `x`
/// (grid units), exact on polynomials of degree `<= deg`.
///
/// Exactness is imposed in a Chebyshev basis adapted to the node interval,
/// solved through a QR factorization of the basis matrix.
pub fn min_norm_weights(x: &[f64], k: usize, deg: usize) -> Vec<f64> {
    let m = x.len();
    assert!(m > deg, "need more nodes than the exactness degree");
    let c = (x[0] + x[m - 1]) / 2.0;
    let s = (x[m - 1] - x[0]) / 2.0;
    // monomial coefficients of T_0..=T_deg in y = (x - c)/s
    let mut coef: Vec<Vec<f64>> = vec![vec![1.0], vec![0.0, 1.0]];
    for d in 2..=deg {
        let mut next = vec![0.0; d + 1];
        for (i, a) in coef[d - 1].iter().enumerate() {
            next[i + 1] += 2.0 * a;
        }
        for (i, a) in coef[d - 2].iter().enumerate() {
            next[i] -= a;
        }
        coef.push(next);
    }
    coef.truncate(deg + 1);
    let cheb = |y: f64| -> Vec<f64> {
        let mut t = vec![1.0, y];
        for d in 2..=deg {
            t.push(2.0 * y * t[d - 1] - t[d - 2]);
        }
        t.truncate(deg + 1);
        t
    };
    let mut basis = DMatrix::<f64>::zeros(deg + 1, m);
    for (j, &xj) in x.iter().enumerate() {
        for (d, t) in cheb((xj - c) / s).into_iter().enumerate() {
            basis[(d, j)] = t;
        }
    }
    let y0 = -c / s;
    let mut rhs = DVector::<f64>::zeros(deg + 1);
    for (d, cd) in coef.iter().enumerate() {
        let mut acc = 0.0;
        for (i, a) in cd.iter().enumerate().skip(k) {
            let falling: f64 = ((i - k + 1)..=i).map(|q| q as f64).product();
            acc += a * falling * y0.powi((i - k) as i32);
        }
        rhs[d] = acc / s.powi(k as i32);
    }
    let qr = basis.transpose().qr();
    let q = qr.q();
    let rt = qr.r().transpose();
    let solve = |b: &DVector<f64>| rt.solve_lower_triangular(b).expect("full-rank Chebyshev basis");
    let mut w = &q * solve(&rhs);
    for _ in 0..2 {
        let res = &rhs - &basis * &w;
        w += &q * solve(&res);
    }
    w.iter().copied().collect()
}

#[derive(Debug, Clone)]
struct Stencil {
    start: usize,
    weights: Vec<f64>,
}

/// Derivative operators of orders 1..=4 on a uniform grid.
#[derive(Debug, Clone)]
pub struct DiffOps {
    n: usize,
    h: f64,
    half_width: usize,
    // stencils[k - 1][i] approximates the k-th derivative at node i
    stencils: Vec<Vec<Stencil>>,
}

pub const DEFAULT_HALF_WIDTH: usize = 10;

impl DiffOps {
    pub fn new(n: usize, h: f64, half_width: usize) -> Result<Self> {
        if half_width < 2 {
            return Err(Error::Grid("stencil half width must be at least 2".into()));
        }
        let edge_len = 4 * half_width + 4;
        if n < edge_len {
            return Err(Error::Grid(format!(
                "grid of {n} points is too coarse for a {edge_len}-point stencil"
            )));
        }
        if !(h > 0.0) {
            return Err(Error::Grid("grid spacing must be positive".into()));
        }
        let r = half_width;
        let centered: Vec<f64> = (0..=2 * r).map(|j| j as f64 - r as f64).collect();
        let cw = fornberg_weights(0.0, &centered, 4);
        let mut stencils: Vec<Vec<_>> = (0..4).map(|_| Vec::with_capacity(n)).collect();
        for i in 0..n {
            let (start, len) = if i >= r && i + r < n {
                (i - r, 2 * r + 1)
            } else if i < r {
                (0, edge_len)
            } else {
                (n - edge_len, edge_len)
            };
            let mut w = if len == 2 * r + 1 {
                cw.clone()
            } else {
                let nodes: Vec<f64> = (0..len).map(|j| (start + j) as f64 - i as f64).collect();
                (0..=4).map(|k| min_norm_weights(&nodes, k, 2 * r + 1)).collect()
            };
            // derivatives annihilate constants; a weight-sum error of 1e-14
            // would otherwise be amplified by h^{-k}
            for wk in w.iter_mut().skip(1) {
                let sum: f64 = wk.iter().sum();
                wk[i - start] -= sum;
            }
            for k in 1..=4 {
                let scale = h.powi(k as i32);
                stencils[k - 1].push(Stencil {
                    start,
                    weights: w[k].iter().map(|c| c / scale).collect(),
                });
            }
        }
        Ok(Self { n, h, half_width, stencils })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    /// `order`-th derivative (1..=4) of `f` at every node.
    pub fn derivative(&self, f: &[f64], order: usize) -> Vec<f64> {
        assert_eq!(f.len(), self.n, "sample length must match grid");
        self.stencils[order - 1]
            .iter()
            .map(|s| s.weights.iter().zip(&f[s.start..]).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// `order`-th derivative at a single node.
    pub fn derivative_at(&self, f: &[f64], order: usize, i: usize) -> f64 {
        let s = &self.stencils[order - 1][i];
        s.weights.iter().zip(&f[s.start..]).map(|(w, v)| w * v).sum()
    }

    /// Sparse row `(start, weights)` of the `order`-th derivative at node `i`.
    pub fn row(&self, order: usize, i: usize) -> (usize, &[f64]) {
        let s = &self.stencils[order - 1][i];
        (s.start, &s.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_point_second_derivative() {
        let x = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let c = fornberg_weights(0.0, &x, 2);
        let expected = [-1.0 / 12.0, 4.0 / 3.0, -2.5, 4.0 / 3.0, -1.0 / 12.0];
        for (a, b) in c[2].iter().zip(expected) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn polynomials_are_differentiated_exactly() {
        let n = 30;
        let h = 0.1;
        let ops = DiffOps::new(n, h, 4).unwrap();
        // degree 8 is within reach of every stencil (9+ points)
        let f: Vec<f64> = (0..n).map(|i| (i as f64 * h).powi(6)).collect();
        let d4 = ops.derivative(&f, 4);
        for (i, d) in d4.iter().enumerate() {
            let t = i as f64 * h;
            let exact = 360.0 * t * t;
            assert!((d - exact).abs() < 1e-7 * (1.0 + exact), "node {i}: {d} vs {exact}");
        }
    }

    #[test]
    fn min_norm_weights_agree_with_fornberg_when_square() {
        let x: Vec<f64> = (0..8).map(|j| j as f64 - 2.0).collect();
        let f = fornberg_weights(0.0, &x, 4);
        for k in 0..=4 {
            let w = min_norm_weights(&x, k, 7);
            for (a, b) in w.iter().zip(&f[k]) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "order {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn edge_stencils_are_small() {
        let ops = DiffOps::new(60, 1.0, 6).unwrap();
        let (_, w) = ops.row(4, 0);
        assert!(w.iter().map(|x| x.abs()).sum::<f64>() < 2e3);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        assert!(DiffOps::new(16, 0.1, 5).is_err());
    }

    #[test]
    fn exponential_fourth_derivative_is_accurate() {
        let n = 101;
        let h = 0.05;
        let ops = DiffOps::new(n, h, 6).unwrap();
        let f: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 * h).exp()).collect();
        let d4 = ops.derivative(&f, 4);
        for (i, d) in d4.iter().enumerate() {
            let exact = 0.7f64.powi(4) * f[i];
            assert!((d - exact).abs() < 1e-8 * f[i], "node {i}: {:e}", d - exact);
        }
    }
}
