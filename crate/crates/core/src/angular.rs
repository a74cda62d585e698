//! Zonal spherical harmonics on S^{n-1} and the Gauss quadrature used to
//! evaluate pointwise nonlinearities of mode expansions.
//!
//! A zonal harmonic of degree `l` depends only on `x = cos(theta)`, the
//! cosine of the angle to a fixed axis. It is a Gegenbauer polynomial
//! `C_l^{(n-2)/2}(x)`, normalized here so that `Z_l(1) = 1`; in particular
//! `Z_1(x) = x = <theta, e>`. Eigenvalues follow `Delta_theta Z_l = -l(l+n-2) Z_l`.

use nalgebra::{DMatrix, SymmetricEigen};

/// Eigenvalue of `-Delta_theta` on degree-`l` harmonics of S^{n-1}.
pub fn mode_eigenvalue(l: usize, n: usize) -> f64 {
    (l * (l + n - 2)) as f64
}

/// Unnormalized Gegenbauer values `C_0..=C_lmax` at `x`.
fn gegenbauer_all(lmax: usize, mu: f64, x: f64) -> Vec<f64> {
    let mut c = Vec::with_capacity(lmax + 1);
    c.push(1.0);
    if lmax >= 1 {
        c.push(2.0 * mu * x);
    }
    for k in 1..lmax {
        let kf = k as f64;
        let next = (2.0 * (kf + mu) * x * c[k] - (kf + 2.0 * mu - 1.0) * c[k - 1]) / (kf + 1.0);
        c.push(next);
    }
    c
}

/// Zonal harmonics `Z_0..=Z_lmax` at `x`, normalized to `Z_l(1) = 1`.
pub fn zonal_all(lmax: usize, n: usize, x: f64) -> Vec<f64> {
    let mu = (n as f64 - 2.0) / 2.0;
    let at_one = gegenbauer_all(lmax, mu, 1.0);
    gegenbauer_all(lmax, mu, x)
        .into_iter()
        .zip(at_one)
        .map(|(c, c1)| c / c1)
        .collect()
}

/// Gauss rule for the weight `(1 - x^2)^{(n-3)/2}` on `[-1, 1]`, the
/// pushforward of the round measure on S^{n-1} to `cos(theta)`. Weights are
/// normalized to sum to one.
pub fn gauss_gegenbauer(q: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mu = (n as f64 - 2.0) / 2.0;
    let mut jac = DMatrix::<f64>::zeros(q, q);
    for k in 1..q {
        let kf = k as f64;
        let beta = kf * (kf + 2.0 * mu - 1.0) / (4.0 * (kf + mu) * (kf + mu - 1.0));
        jac[(k, k - 1)] = beta.sqrt();
        jac[(k - 1, k)] = beta.sqrt();
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

/// Quadrature set with precomputed harmonic values, used to move between
/// mode coefficients and pointwise angular samples.
#[derive(Debug, Clone)]
pub struct AngularQuadrature {
    pub n: usize,
    pub lmax: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    // basis[l][j] = Z_l(nodes[j])
    basis: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl AngularQuadrature {
    pub fn new(n: usize, lmax: usize) -> Self {
        let q = 3 * lmax + 6;
        let (nodes, weights) = gauss_gegenbauer(q, n);
        let mut basis = vec![Vec::with_capacity(q); lmax + 1];
        for &x in &nodes {
            for (l, z) in zonal_all(lmax, n, x).into_iter().enumerate() {
                basis[l].push(z);
            }
        }
        let norms = basis
            .iter()
            .map(|b| b.iter().zip(&weights).map(|(z, w)| w * z * z).sum())
            .collect();
        Self { n, lmax, nodes, weights, basis, norms }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// `Z_l` at quadrature node `j`.
    pub fn basis_value(&self, l: usize, j: usize) -> f64 {
        self.basis[l][j]
    }

    /// Point values at the nodes from coefficients indexed by mode label.
    pub fn reconstruct(&self, coeffs: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes.len()];
        for &(l, c) in coeffs {
            for (o, z) in out.iter_mut().zip(&self.basis[l]) {
                *o += c * z;
            }
        }
        out
    }

    /// Coefficient of `Z_l` in the expansion of the node values `f`.
    pub fn project(&self, f: &[f64], l: usize) -> f64 {
        let s: f64 = f
            .iter()
            .zip(&self.basis[l])
            .zip(&self.weights)
            .map(|((v, z), w)| v * z * w)
            .sum();
        s / self.norms[l]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_harmonic_is_the_axis_coordinate() {
        for n in [5, 6, 9] {
            let z = zonal_all(3, n, 0.37);
            assert!((z[0] - 1.0).abs() < 1e-15);
            assert!((z[1] - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn harmonics_are_orthogonal_under_the_rule() {
        let quad = AngularQuadrature::new(5, 4);
        for a in 0..=4 {
            for b in 0..a {
                let s: f64 = (0..quad.num_nodes())
                    .map(|j| quad.weights[j] * quad.basis_value(a, j) * quad.basis_value(b, j))
                    .sum();
                assert!(s.abs() < 1e-13, "<Z_{a}, Z_{b}> = {s}");
            }
        }
    }

    #[test]
    fn projection_inverts_reconstruction() {
        let quad = AngularQuadrature::new(6, 2);
        let coeffs = [(0, 0.8), (1, -0.02), (2, 0.003)];
        let f = quad.reconstruct(&coeffs);
        for &(l, c) in &coeffs {
            assert!((quad.project(&f, l) - c).abs() < 1e-14);
        }
    }

    #[test]
    fn second_harmonic_is_an_eigenfunction() {
        // For zonal f(x) on S^{n-1}: Delta f = (1 - x^2) f'' - (n - 1) x f''
        let n = 5;
        let x = 0.3;
        let h = 1e-4;
        let z = |x: f64| zonal_all(2, n, x)[2];
        let d1 = (z(x + h) - z(x - h)) / (2.0 * h);
        let d2 = (z(x + h) - 2.0 * z(x) + z(x - h)) / (h * h);
        let lap = (1.0 - x * x) * d2 - (n as f64 - 1.0) * x * d1;
        assert!((lap + mode_eigenvalue(2, n) * z(x)).abs() < 1e-6);
    }
}
