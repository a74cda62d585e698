//! The linearized operator about a Delaunay orbit.
//!
//! Mode `l` of the Jacobi operator acts on profiles `w(t)` as
//! `w'''' - (2 lambda + c2) w'' + (lambda^2 + n(n-4)/2 lambda + c0 - kappa v^{8/(n-4)}) w`
//! with `lambda = l(l+n-2)` and `kappa = n(n+4)(n^2-4)/16`. This module builds
//! its explicit solutions (Jacobi fields), its monodromy over one period and
//! the resulting Floquet exponents, and the bilinear concomitant that is
//! conserved along pairs of solutions.
//!
//! Monodromy matrices are stored as products of short-time propagators. For
//! mode 1 at small necksize the full product has entries of size `e^{3.7 T}`,
//! so determinants and the subdominant exponents are computed from the factors
//! (and from their second compound matrices), never from the product alone.

use nalgebra::{Matrix2, Matrix4, Matrix6, SymmetricEigen, Vector4, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::mode_eigenvalue;
use crate::delaunay::{fourth_derivative, linear_fit, power, solve_orbit, DelaunayOrbit, HALF_NODES};
use crate::error::{Error, Result};
use crate::fd::{DiffOps, DEFAULT_HALF_WIDTH};
use crate::gauges::{CylField, Dimension, GaugeConstants};
use crate::ode::{dopri_step, Dopri5, Flow};

/// Default highest mode label for spectra.
pub const DEFAULT_MAX_MODE: usize = 4;

/// Target length of one propagator factor.
const PIECE_LEN: f64 = 0.25;

/// Mode `l` of the Jacobi operator about an orbit.
#[derive(Debug, Clone)]
pub struct ModeOperator {
    pub orbit: DelaunayOrbit,
    pub l: usize,
    pub lambda: f64,
}

impl ModeOperator {
    pub fn new(orbit: &DelaunayOrbit, l: usize) -> Self {
        Self { orbit: orbit.clone(), l, lambda: mode_eigenvalue(l, orbit.n()) }
    }

    pub fn consts(&self) -> &GaugeConstants {
        &self.orbit.consts
    }

    /// Coefficient `2 lambda + c2` of `-w''`.
    pub fn second(&self) -> f64 {
        self.consts().mode_second(self.lambda)
    }

    /// Zeroth-order coefficient at `t`.
    pub fn potential(&self, t: f64) -> f64 {
        let c = self.consts();
        c.mode_constant(self.lambda) - c.jacobi_coeff() * power(self.orbit.state(t).v, c.p - 1.0)
    }

    /// The operator applied to a jet `(w, w', w'', w''', w'''')` at `t`.
    pub fn apply_jet(&self, t: f64, jet: &[f64; 5]) -> f64 {
        jet[4] - self.second() * jet[2] + self.potential(t) * jet[0]
    }

    /// First-order form for `(w, w', w'', w''')`.
    pub fn flow(&self, t: f64, w: &[f64; 4]) -> [f64; 4] {
        [w[1], w[2], w[3], self.second() * w[2] - self.potential(t) * w[0]]
    }

    /// Matrix `J` with `omega(x, y) = x^T J y` on states `(w, w', w'', w''')`.
    pub fn pairing_matrix(&self) -> Matrix4<f64> {
        let a = self.second();
        Matrix4::new(
            0.0, -a, 0.0, 1.0, //
            a, 0.0, -1.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            -1.0, 0.0, 0.0, 0.0,
        )
    }
}

/// Apply a mode operator to samples `w` on the uniform grid starting at
/// `t_min` with spacing `h`.
pub fn mode_apply(op: &ModeOperator, t_min: f64, h: f64, w: &[f64]) -> Result<Vec<f64>> {
    let ops = DiffOps::new(w.len(), h, DEFAULT_HALF_WIDTH)?;
    mode_apply_with(op, t_min, w, &ops)
}

pub fn mode_apply_with(op: &ModeOperator, t_min: f64, w: &[f64], ops: &DiffOps) -> Result<Vec<f64>> {
    if ops.len() != w.len() {
        return Err(Error::Grid("stencil set does not match the samples".into()));
    }
    let h = ops.spacing();
    let d2 = ops.derivative(w, 2);
    let d4 = ops.derivative(w, 4);
    let a = op.second();
    Ok((0..w.len())
        .map(|i| d4[i] - a * d2[i] + op.potential(t_min + i as f64 * h) * w[i])
        .collect())
}

/// Bilinear concomitant of the mode operator on jets `(w, w', w'', w''')`:
/// `v w''' - v' w'' + v'' w' - v''' w - (2 lambda + c2)(v w' - v' w)`.
pub fn symplectic_pairing(op: &ModeOperator, v: &[f64], w: &[f64]) -> f64 {
    let a = op.second();
    v[0] * w[3] - v[1] * w[2] + v[2] * w[1] - v[3] * w[0] - a * (v[0] * w[1] - v[1] * w[0])
}

fn propagate(op: &ModeOperator, ta: f64, tb: f64) -> Result<Matrix4<f64>> {
    let a = op.second();
    let f = |t: f64, y: &[f64; 16]| {
        let b = op.potential(t);
        let mut out = [0.0; 16];
        for c in 0..4 {
            let w = &y[4 * c..4 * c + 4];
            out[4 * c] = w[1];
            out[4 * c + 1] = w[2];
            out[4 * c + 2] = w[3];
            out[4 * c + 3] = a * w[2] - b * w[0];
        }
        out
    };
    let mut y0 = [0.0; 16];
    for c in 0..4 {
        y0[5 * c] = 1.0;
    }
    let out = Dopri5::with_tol(1e-13).solve(f, ta, y0, tb, |_| Flow::Continue)?;
    Ok(Matrix4::from_fn(|r, c| out.y[4 * c + r]))
}

/// Period map of a mode operator, kept as a product of short propagators.
#[derive(Debug, Clone)]
pub struct Monodromy {
    pub lambda: f64,
    pub period: f64,
    /// Phase at which the period map starts.
    pub t0: f64,
    pieces: Vec<Matrix4<f64>>,
    inverses: Vec<Matrix4<f64>>,
}

pub fn monodromy(op: &ModeOperator) -> Result<Monodromy> {
    monodromy_at(op, 0.0)
}

/// Period map over `[t0, t0 + T]`.
pub fn monodromy_at(op: &ModeOperator, t0: f64) -> Result<Monodromy> {
    let period = op.orbit.period;
    let k = ((period / PIECE_LEN).ceil() as usize).max(16);
    let dt = period / k as f64;
    let pieces = (0..k)
        .map(|i| propagate(op, t0 + i as f64 * dt, t0 + (i + 1) as f64 * dt))
        .collect::<Result<Vec<_>>>()?;
    let inverses = pieces
        .iter()
        .map(|p| p.try_inverse().ok_or_else(|| Error::numerical("singular propagator")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Monodromy { lambda: op.lambda, period, t0, pieces, inverses })
}

/// Second compound (exterior square) of a 4x4 matrix.
pub fn compound2(m: &Matrix4<f64>) -> Matrix6<f64> {
    const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    Matrix6::from_fn(|r, c| {
        let (i, j) = PAIRS[r];
        let (k, l) = PAIRS[c];
        m[(i, k)] * m[(j, l)] - m[(i, l)] * m[(j, k)]
    })
}

fn spectral_radius4(m: &Matrix4<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn spectral_radius6(m: &Matrix6<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

impl Monodromy {
    pub fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        self.pieces.iter().fold(Matrix4::identity(), |acc, p| p * acc)
    }

    pub fn inverse_matrix(&self) -> Matrix4<f64> {
        self.inverses.iter().fold(Matrix4::identity(), |acc, p| acc * p)
    }

    /// Product of the factor determinants.
    pub fn determinant(&self) -> f64 {
        self.pieces.iter().map(|p| p.determinant()).product()
    }

    pub fn apply(&self, x: &Vector4<f64>) -> Vector4<f64> {
        self.pieces.iter().fold(*x, |acc, p| p * acc)
    }

    pub fn apply_inverse(&self, x: &Vector4<f64>) -> Vector4<f64> {
        self.inverses.iter().rev().fold(*x, |acc, p| p * acc)
    }

    /// Floquet exponents `log|mu| / T`, largest first.
    ///
    /// The top exponent and the sum of the top two come from the period map
    /// and its second compound; the bottom two likewise from the inverse map.
    pub fn exponents(&self) -> [f64; 4] {
        let t = self.period;
        let fwd2 = self.pieces.iter().fold(Matrix6::identity(), |acc, p| compound2(p) * acc);
        let bwd2 = self.inverses.iter().rev().fold(Matrix6::identity(), |acc, p| compound2(p) * acc);
        let g1 = spectral_radius4(&self.matrix()).ln() / t;
        let g12 = spectral_radius6(&fwd2).ln() / t;
        let g4 = -spectral_radius4(&self.inverse_matrix()).ln() / t;
        let g34 = -spectral_radius6(&bwd2).ln() / t;
        [g1, g12 - g1, g34 - g4, g4]
    }

    /// Unit eigenvector of the dominant real multiplier, by power iteration.
    fn dominant_vector(&self, forward: bool) -> Option<Vector4<f64>> {
        let mut x = Vector4::new(1.0, 0.31, -0.27, 0.113).normalize();
        for _ in 0..200 {
            let y = if forward { self.apply(&x) } else { self.apply_inverse(&x) };
            let mut y = y.normalize();
            if y.dot(&x) < 0.0 {
                y = -y;
            }
            let change = (y - x).norm();
            x = y;
            if change < 1e-14 {
                return Some(x);
            }
        }
        None
    }

    /// Matrix of the period map on the centre subspace, the pairing-orthogonal
    /// complement of the dominant growing and decaying directions.
    pub fn centre_block(&self, pairing: &Matrix4<f64>) -> Option<Matrix2<f64>> {
        let up = self.dominant_vector(true)?;
        let um = self.dominant_vector(false)?;
        let rows = [pairing.transpose() * up, pairing.transpose() * um];
        let mut q: Vec<Vector4<f64>> = Vec::new();
        for r in rows {
            let mut r = r;
            for b in &q {
                r -= b * b.dot(&r);
            }
            q.push(r.normalize());
        }
        let mut cands: Vec<Vector4<f64>> = (0..4)
            .map(|i| {
                let mut e = Vector4::zeros();
                e[i] = 1.0;
                for b in &q {
                    e -= b * b.dot(&e);
                }
                e
            })
            .collect();
        cands.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
        let c1 = cands[0].normalize();
        let mut c2 = cands[1] - c1 * c1.dot(&cands[1]);
        for b in &q {
            c2 -= b * b.dot(&c2);
        }
        let c2 = c2.normalize();
        let basis = Matrix4::from_columns(&[up, um, c1, c2]);
        let lu = basis.lu();
        let mut block = Matrix2::zeros();
        for (i, c) in [c1, c2].iter().enumerate() {
            let coef = lu.solve(&self.apply(c))?;
            block[(0, i)] = coef[2];
            block[(1, i)] = coef[3];
        }
        Some(block)
    }

    /// Orthonormal basis (4 x dim) of the invariant subspace of the `dim`
    /// dominant multipliers of the forward or backward period map.
    pub fn dominant_subspace(&self, dim: usize, forward: bool) -> DMatrix<f64> {
        let mut q = DMatrix::<f64>::identity(4, dim);
        for _ in 0..100 {
            let mut y = q.clone();
            let factors: Box<dyn Iterator<Item = &Matrix4<f64>>> = if forward {
                Box::new(self.pieces.iter())
            } else {
                Box::new(self.inverses.iter().rev())
            };
            for p in factors {
                let pd = DMatrix::from_column_slice(4, 4, p.as_slice());
                y = (pd * y).qr().q();
            }
            let overlap = (q.transpose() * &y).singular_values();
            q = y;
            if overlap.iter().all(|s| (1.0 - s).abs() < 1e-14) {
                break;
            }
        }
        q
    }
}

/// Floquet data of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModeSpectrum {
    pub l: usize,
    pub lambda: f64,
    pub exponents: Vec<f64>,
    pub jordan_flags: Vec<bool>,
}

/// Floquet exponents of several modes about one orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IndicialSpectrum {
    pub eps: f64,
    pub n: usize,
    pub modes: Vec<ModeSpectrum>,
}

/// Exponents within this distance of zero form the centre cluster.
const CENTRE_TOL: f64 = 1e-6;

pub fn mode_spectrum(op: &ModeOperator) -> Result<ModeSpectrum> {
    let mono = monodromy(op)?;
    let exponents = mono.exponents();
    let mut jordan_flags = vec![false; 4];
    if exponents[1].abs() < CENTRE_TOL && exponents[2].abs() < CENTRE_TOL {
        if let Some(block) = mono.centre_block(&op.pairing_matrix()) {
            let near_one = (block.trace() - 2.0).abs() < 2.0 * CENTRE_TOL
                && (block.determinant() - 1.0).abs() < 2.0 * CENTRE_TOL;
            let defect = (block - Matrix2::identity()).abs().max();
            if near_one && defect > CENTRE_TOL {
                jordan_flags[1] = true;
                jordan_flags[2] = true;
            }
        }
    }
    Ok(ModeSpectrum { l: op.l, lambda: op.lambda, exponents: exponents.to_vec(), jordan_flags })
}

/// Floquet exponents for the given mode labels, computed in parallel.
pub fn indicial_roots(orbit: &DelaunayOrbit, modes: &[usize]) -> Result<IndicialSpectrum> {
    let modes = modes
        .par_iter()
        .map(|&l| mode_spectrum(&ModeOperator::new(orbit, l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(IndicialSpectrum { eps: orbit.eps, n: orbit.n(), modes })
}

impl IndicialSpectrum {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn mode(&self, l: usize) -> Option<&ModeSpectrum> {
        self.modes.iter().find(|m| m.l == l)
    }
}

/// Long-format table `eps,n,l,lambda,index,exponent,jordan` for a sweep.
pub fn spectra_csv(spectra: &[IndicialSpectrum]) -> String {
    let mut out = String::from("eps,n,l,lambda,index,exponent,jordan\n");
    for s in spectra {
        for m in &s.modes {
            for (i, (g, j)) in m.exponents.iter().zip(&m.jordan_flags).enumerate() {
                out.push_str(&format!("{},{},{},{},{},{},{}\n", s.eps, s.n, m.l, m.lambda, i, g, j));
            }
        }
    }
    out
}

/// Roots `(re, im)` of the characteristic quartic about the constant orbit,
/// ordered by decreasing real part.
pub fn constant_orbit_roots(consts: &GaugeConstants, lambda: f64) -> [(f64, f64); 4] {
    let a = consts.mode_second(lambda);
    let b = consts.mode_constant(lambda) - consts.jacobi_coeff() * power(consts.eps_bar, consts.p - 1.0);
    let disc = a * a - 4.0 * b;
    let mut roots = Vec::with_capacity(4);
    let sq = |re: f64, im: f64| {
        // principal square root of re + i im
        let r = (re * re + im * im).sqrt();
        let x = ((r + re) / 2.0).max(0.0).sqrt();
        let y = ((r - re) / 2.0).max(0.0).sqrt().copysign(im);
        (x, y)
    };
    let mu2 = if disc >= 0.0 {
        [((a + disc.sqrt()) / 2.0, 0.0), ((a - disc.sqrt()) / 2.0, 0.0)]
    } else {
        [(a / 2.0, (-disc).sqrt() / 2.0), (a / 2.0, -(-disc).sqrt() / 2.0)]
    };
    for (re, im) in mu2 {
        let (x, y) = if im == 0.0 && re < 0.0 { (0.0, (-re).sqrt()) } else { sq(re, im) };
        roots.push((x, y));
        roots.push((-x, -y));
    }
    roots.sort_by(|p, q| q.0.total_cmp(&p.0).then(q.1.total_cmp(&p.1)));
    [roots[0], roots[1], roots[2], roots[3]]
}

/// The explicit Jacobi fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// `v'`, bounded and periodic.
    #[serde(rename = "v0+")]
    ZeroPlus,
    /// `d v / d eps`, growing linearly.
    #[serde(rename = "v0-")]
    ZeroMinus,
    /// `e^{-t}((n-4)/2 v - v')`.
    #[serde(rename = "v1+")]
    OnePlus,
    /// `e^{t}((4-n)/2 v - v')`.
    #[serde(rename = "v1-")]
    OneMinus,
}

/// Qualitative growth of a generator as `t` increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Bounded,
    Linear,
    Decaying,
    Growing,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 4] =
        [GeneratorKind::ZeroPlus, GeneratorKind::ZeroMinus, GeneratorKind::OnePlus, GeneratorKind::OneMinus];

    pub fn mode(self) -> usize {
        match self {
            GeneratorKind::ZeroPlus | GeneratorKind::ZeroMinus => 0,
            GeneratorKind::OnePlus | GeneratorKind::OneMinus => 1,
        }
    }

    pub fn growth(self) -> Growth {
        match self {
            GeneratorKind::ZeroPlus => Growth::Bounded,
            GeneratorKind::ZeroMinus => Growth::Linear,
            GeneratorKind::OnePlus => Growth::Decaying,
            GeneratorKind::OneMinus => Growth::Growing,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GeneratorKind::ZeroPlus => "v0+",
            GeneratorKind::ZeroMinus => "v0-",
            GeneratorKind::OnePlus => "v1+",
            GeneratorKind::OneMinus => "v1-",
        }
    }
}

/// Jacobi fields of one orbit. Modes `l >= 1` share the `l = 1` profiles.
#[derive(Debug, Clone)]
pub struct JacobiBasis {
    orbit: DelaunayOrbit,
    /// `d v''(0) / d eps`.
    pub b_prime: f64,
    /// `d T / d eps`.
    pub t_prime: f64,
    // d/d eps of the orbit state on the node grid over [0, T/2]
    z_nodes: Vec<[f64; 4]>,
}

fn variational_rhs(c: &GaugeConstants) -> impl Fn(f64, &[f64; 12]) -> [f64; 12] + '_ {
    let kappa = c.jacobi_coeff();
    move |_, y| {
        let v = [y[0], y[1], y[2], y[3]];
        let pot = kappa * power(y[0], c.p - 1.0);
        let mut out = [0.0; 12];
        out[..4].copy_from_slice(&[y[1], y[2], y[3], fourth_derivative(&v, c)]);
        for base in [4, 8] {
            out[base] = y[base + 1];
            out[base + 1] = y[base + 2];
            out[base + 2] = y[base + 3];
            out[base + 3] = c.c2 * y[base + 2] - c.c0 * y[base] + pot * y[base];
        }
        out
    }
}

/// Build the Jacobi fields of `orbit`.
///
/// `d v / d eps` solves the linearized equation from initial data
/// `(1, 0, b', 0)`; `b'` and `T'` follow from differentiating the symmetry
/// conditions `v'(T/2) = v'''(T/2) = 0`. Past one half period the field is
/// extended by evenness and `w(t + T) = w(t) - T' v'(t)`.
pub fn generators(orbit: &DelaunayOrbit) -> Result<JacobiBasis> {
    if orbit.is_constant() {
        return Err(Error::domain("the constant orbit is the end of the family; d/d eps is singular there"));
    }
    let c = &orbit.consts;
    let f = variational_rhs(c);
    let dt = orbit.node_dt();
    let mut y = [0.0; 12];
    y[..4].copy_from_slice(&orbit.node(0));
    y[4] = 1.0;
    y[10] = 1.0;
    let mut za = Vec::with_capacity(HALF_NODES + 1);
    let mut zb = Vec::with_capacity(HALF_NODES + 1);
    let split = |y: &[f64; 12]| ([y[4], y[5], y[6], y[7]], [y[8], y[9], y[10], y[11]]);
    let (a0, b0) = split(&y);
    za.push(a0);
    zb.push(b0);
    for k in 0..HALF_NODES {
        y = dopri_step(&f, k as f64 * dt, &y, dt);
        let (a, b) = split(&y);
        za.push(a);
        zb.push(b);
    }
    let v = [y[0], y[1], y[2], y[3]];
    let v4 = fourth_derivative(&v, c);
    let (ea, eb) = (za[HALF_NODES], zb[HALF_NODES]);
    let det = eb[1] * v4 - v[2] * eb[3];
    if det == 0.0 || !det.is_finite() {
        return Err(Error::numerical("degenerate symmetry conditions for d/d eps"));
    }
    let b_prime = (-ea[1] * v4 + ea[3] * v[2]) / det;
    let half_prime = (-eb[1] * ea[3] + eb[3] * ea[1]) / det;
    let z_nodes = za
        .iter()
        .zip(&zb)
        .map(|(a, b)| [a[0] + b_prime * b[0], a[1] + b_prime * b[1], a[2] + b_prime * b[2], a[3] + b_prime * b[3]])
        .collect();
    Ok(JacobiBasis { orbit: orbit.clone(), b_prime, t_prime: 2.0 * half_prime, z_nodes })
}

fn binom(k: usize, j: usize) -> f64 {
    (0..j).fold(1.0, |acc, i| acc * (k - i) as f64 / (i + 1) as f64)
}

impl JacobiBasis {
    pub fn orbit(&self) -> &DelaunayOrbit {
        &self.orbit
    }

    pub fn operator(&self, kind: GeneratorKind) -> ModeOperator {
        ModeOperator::new(&self.orbit, kind.mode())
    }

    /// `d/d eps` of the orbit state at `s` in `[0, T/2]`.
    fn eps_state(&self, s: f64) -> [f64; 4] {
        let dt = self.orbit.node_dt();
        let k = ((s / dt).round() as usize).min(HALF_NODES);
        let tk = k as f64 * dt;
        if s == tk {
            return self.z_nodes[k];
        }
        let mut y = [0.0; 12];
        y[..4].copy_from_slice(&self.orbit.node(k));
        y[4..8].copy_from_slice(&self.z_nodes[k]);
        let y = dopri_step(variational_rhs(&self.orbit.consts), tk, &y, s - tk);
        [y[4], y[5], y[6], y[7]]
    }

    fn zero_minus_jet(&self, t: f64) -> [f64; 5] {
        let period = self.orbit.period;
        let k = ((t + 0.5 * period) / period).floor();
        let s = t - k * period;
        let sa = s.abs();
        let z = self.eps_state(sa);
        let c = &self.orbit.consts;
        let v = self.orbit.state(sa).v;
        let z4 = c.c2 * z[2] - c.c0 * z[0] + c.jacobi_coeff() * power(v, c.p - 1.0) * z[0];
        let sign = if s < 0.0 { -1.0 } else { 1.0 };
        let d = self.orbit.derivs(s);
        let mut jet = [z[0], sign * z[1], z[2], sign * z[3], z4];
        for (j, out) in jet.iter_mut().enumerate() {
            *out -= k * self.t_prime * d[j + 1];
        }
        jet
    }

    /// Value and derivatives of orders 0..=4 of a generator at `t`.
    pub fn jet(&self, kind: GeneratorKind, t: f64) -> [f64; 5] {
        match kind {
            GeneratorKind::ZeroPlus => {
                let d = self.orbit.derivs(t);
                [d[1], d[2], d[3], d[4], d[5]]
            }
            GeneratorKind::ZeroMinus => self.zero_minus_jet(t),
            GeneratorKind::OnePlus | GeneratorKind::OneMinus => {
                let a = (self.orbit.n() as f64 - 4.0) / 2.0;
                let d = self.orbit.derivs(t);
                let (rate, coef) = if kind == GeneratorKind::OnePlus { (-1.0, a) } else { (1.0, -a) };
                let h: Vec<f64> = (0..5).map(|j| coef * d[j] - d[j + 1]).collect();
                let e = (rate * t).exp();
                let mut jet = [0.0; 5];
                for (k, out) in jet.iter_mut().enumerate() {
                    *out = e * (0..=k).map(|j| binom(k, j) * rate.powi((k - j) as i32) * h[j]).sum::<f64>();
                }
                jet
            }
        }
    }

    pub fn value(&self, kind: GeneratorKind, t: f64) -> f64 {
        self.jet(kind, t)[0]
    }

    /// Samples on `n_pts` uniform points from `t_min` with spacing `h`.
    pub fn sample(&self, kind: GeneratorKind, t_min: f64, h: f64, n_pts: usize) -> Vec<f64> {
        (0..n_pts).map(|i| self.value(kind, t_min + i as f64 * h)).collect()
    }

    /// Sup over `window` of the finite-difference residual of a sampled
    /// generator under its mode operator. Samples extend past the window by
    /// the stencil half width so the window sees centred stencils only.
    pub fn residual(&self, kind: GeneratorKind, window: (f64, f64), points_per_period: usize) -> Result<f64> {
        let h = self.orbit.period / points_per_period as f64;
        let r = DEFAULT_HALF_WIDTH;
        let inner = ((window.1 - window.0) / h).ceil() as usize + 1;
        let t_min = window.0 - r as f64 * h;
        let n_pts = inner + 2 * r;
        let w = self.sample(kind, t_min, h, n_pts);
        let res = mode_apply(&self.operator(kind), t_min, h, &w)?;
        Ok(res[r..r + inner].iter().fold(0.0, |a, x| a.max(x.abs())))
    }

    /// One-period window on which a generator is of unit size: centred for
    /// the 0-modes, `[0, T]` for the decaying field and `[-T, 0]` for the
    /// growing one.
    pub fn unit_window(&self, kind: GeneratorKind) -> (f64, f64) {
        let p = self.orbit.period;
        match kind.growth() {
            Growth::Decaying => (0.0, p),
            Growth::Growing => (-p, 0.0),
            _ => (-0.5 * p, 0.5 * p),
        }
    }

    /// Least-squares rate of `log max|g|` over consecutive period windows.
    pub fn measured_growth(&self, kind: GeneratorKind, t_start: f64, periods: usize) -> Result<f64> {
        if periods < 2 {
            return Err(Error::domain("need at least two periods to measure growth"));
        }
        let period = self.orbit.period;
        let per_window = 64;
        let mut xs = Vec::with_capacity(periods);
        let mut ys = Vec::with_capacity(periods);
        for w in 0..periods {
            let start = t_start + w as f64 * period;
            let m = (0..per_window)
                .map(|i| self.value(kind, start + period * i as f64 / per_window as f64).abs())
                .fold(0.0, f64::max);
            xs.push(start);
            ys.push(m.ln());
        }
        Ok(linear_fit(&xs, &ys).0)
    }

    /// `omega(a, b)` at `t`; both generators must belong to the same mode.
    pub fn pairing(&self, a: GeneratorKind, b: GeneratorKind, t: f64) -> Result<f64> {
        if a.mode() != b.mode() {
            return Err(Error::domain("pairing is defined between fields of the same mode"));
        }
        Ok(symplectic_pairing(&self.operator(a), &self.jet(a, t), &self.jet(b, t)))
    }

    /// Largest deviation of `omega(a, b)` from its value at `t0` over one period.
    pub fn pairing_variation(&self, a: GeneratorKind, b: GeneratorKind, t0: f64, samples: usize) -> Result<f64> {
        let base = self.pairing(a, b, t0)?;
        let mut worst: f64 = 0.0;
        for i in 1..=samples {
            let t = t0 + self.orbit.period * i as f64 / samples as f64;
            worst = worst.max((self.pairing(a, b, t)? - base).abs());
        }
        Ok(worst)
    }
}

/// `d v / d eps` at `ts` from neighbouring orbits: centred differences, or a
/// second-order one-sided rule when `eps + h` leaves the family.
pub fn eps_derivative_fd(orbit: &DelaunayOrbit, h: f64, ts: &[f64]) -> Result<Vec<f64>> {
    let n = Dimension::new(orbit.n())?;
    let eps = orbit.eps;
    let tol = orbit.tol;
    if eps + h < orbit.consts.eps_bar {
        let hi = solve_orbit(n, eps + h, tol)?;
        let lo = solve_orbit(n, eps - h, tol)?;
        Ok(ts.iter().map(|&t| (hi.state(t).v - lo.state(t).v) / (2.0 * h)).collect())
    } else {
        let m1 = solve_orbit(n, eps - h, tol)?;
        let m2 = solve_orbit(n, eps - 2.0 * h, tol)?;
        Ok(ts
            .iter()
            .map(|&t| (3.0 * orbit.state(t).v - 4.0 * m1.state(t).v + m2.state(t).v) / (2.0 * h))
            .collect())
    }
}

/// Centred difference of the orbit Hamiltonian in `eps`.
pub fn hamiltonian_slope(n: Dimension, eps: f64, h: f64, tol: f64) -> Result<f64> {
    let hi = solve_orbit(n, eps + h, tol)?;
    let lo = solve_orbit(n, eps - h, tol)?;
    Ok((hi.hamiltonian_value - lo.hamiltonian_value) / (2.0 * h))
}

/// Smooth monotone step, `0` for `x <= 0` and `1` for `x >= 1`.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / x).exp();
        let b = (-1.0 / (1.0 - x)).exp();
        a / (a + b)
    }
}

/// Cutoff rising from `0` at `t_start` to `1` at `t_full` (falling when
/// `t_full < t_start`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CutoffSpec {
    pub t_start: f64,
    pub t_full: f64,
}

impl CutoffSpec {
    pub fn value(&self, t: f64) -> f64 {
        smooth_step((t - self.t_start) / (self.t_full - self.t_start))
    }
}

/// One element `chi v^{l,+-} phi` of the deficiency space. For `l = 1` the
/// field holds the radial profile and `direction` names the coordinate
/// harmonic `theta_j` it multiplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeficiencyElement {
    pub kind: GeneratorKind,
    pub direction: Option<usize>,
    pub field: CylField,
}

/// Cut-off Jacobi fields of one end on the grid `[t_min, t_max]`, `n_t`
/// points: two for `l = 0` and two per coordinate direction for `l = 1`.
pub fn deficiency_basis(
    basis: &JacobiBasis,
    cutoff: &CutoffSpec,
    t_min: f64,
    t_max: f64,
    n_t: usize,
) -> Result<Vec<DeficiencyElement>> {
    if cutoff.t_full == cutoff.t_start {
        return Err(Error::domain("cutoff transition has zero width"));
    }
    let n = basis.orbit.n();
    let proto = CylField::new(n, t_min, t_max, n_t)?;
    let grid = proto.grid();
    let make = |kind: GeneratorKind| -> Result<CylField> {
        let mut f = proto.clone();
        f.set_mode(kind.mode(), grid.iter().map(|&t| cutoff.value(t) * basis.value(kind, t)).collect())?;
        Ok(f)
    };
    let mut out = Vec::with_capacity(2 * (n + 1));
    for kind in [GeneratorKind::ZeroPlus, GeneratorKind::ZeroMinus] {
        out.push(DeficiencyElement { kind, direction: None, field: make(kind)? });
    }
    let plus = make(GeneratorKind::OnePlus)?;
    let minus = make(GeneratorKind::OneMinus)?;
    for j in 0..n {
        out.push(DeficiencyElement { kind: GeneratorKind::OnePlus, direction: Some(j), field: plus.clone() });
        out.push(DeficiencyElement { kind: GeneratorKind::OneMinus, direction: Some(j), field: minus.clone() });
    }
    Ok(out)
}

/// Smallest eigenvalue of the Gram matrix of the normalized elements, with
/// the `L^2(dt dtheta)` inner product (coordinate harmonics are orthogonal).
pub fn gram_sigma_min(elements: &[DeficiencyElement]) -> f64 {
    let m = elements.len();
    if m == 0 {
        return 0.0;
    }
    let ip = |a: &DeficiencyElement, b: &DeficiencyElement| -> f64 {
        if a.direction != b.direction {
            return 0.0;
        }
        let h = a.field.spacing();
        a.field
            .modes
            .iter()
            .filter_map(|ma| b.field.mode(ma.l).map(|sb| (ma, sb)))
            .map(|(ma, sb)| {
                let s: f64 = ma.samples.iter().zip(sb).map(|(x, y)| x * y).sum();
                let ends = ma.samples[0] * sb[0] + ma.samples[ma.samples.len() - 1] * sb[sb.len() - 1];
                h * (s - 0.5 * ends)
            })
            .sum()
    };
    let norms: Vec<f64> = elements.iter().map(|e| ip(e, e).sqrt()).collect();
    let gram = DMatrix::from_fn(m, m, |i, j| ip(&elements[i], &elements[j]) / (norms[i] * norms[j]));
    SymmetricEigen::new(gram).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delaunay::DEFAULT_TOL;

    fn orbit(eps: f64) -> DelaunayOrbit {
        solve_orbit(Dimension::new(5).unwrap(), eps, DEFAULT_TOL).unwrap()
    }

    fn bar() -> DelaunayOrbit {
        let c = GaugeConstants::for_dimension(5).unwrap();
        orbit(c.eps_bar)
    }

    #[test]
    fn exponentials_on_the_constant_orbit() {
        let o = bar();
        let op = ModeOperator::new(&o, 1);
        let mu = 0.8;
        let h = 0.05;
        let w: Vec<f64> = (0..200).map(|i| (mu * i as f64 * h).exp()).collect();
        let out = mode_apply(&op, 0.0, h, &w).unwrap();
        // quartic: mu^4 - 14.5 mu^2 + 13.5
        let q = mu.powi(4) - 14.5 * mu * mu + 13.5;
        let r = DEFAULT_HALF_WIDTH;
        for i in r..200 - r {
            assert!((out[i] - q * w[i]).abs() < 1e-8 * w[i], "node {i}: {:e}", out[i] - q * w[i]);
        }
    }

    #[test]
    fn compound_of_a_product_is_the_product_of_compounds() {
        let a = Matrix4::from_fn(|i, j| ((i * 3 + j * 7) % 5) as f64 - 1.5);
        let b = Matrix4::from_fn(|i, j| ((i + 2 * j) % 3) as f64 * 0.5 + if i == j { 1.0 } else { 0.0 });
        let lhs = compound2(&(a * b));
        let rhs = compound2(&a) * compound2(&b);
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn constant_orbit_roots_match_the_quartic() {
        let c = GaugeConstants::for_dimension(5).unwrap();
        let r = constant_orbit_roots(&c, 4.0);
        assert!((r[0].0 - 13.5f64.sqrt()).abs() < 1e-12);
        assert!((r[1].0 - 1.0).abs() < 1e-12);
        let r0 = constant_orbit_roots(&c, 0.0);
        assert!((r0[0].0 - 2.83766).abs() < 1e-5);
        assert!(r0[1].0.abs() < 1e-12 && (r0[1].1.abs() - 1.24593).abs() < 1e-5);
    }

    #[test]
    fn smooth_step_is_monotone() {
        let mut prev = 0.0;
        for i in 0..=100 {
            let s = smooth_step(-0.2 + 1.4 * i as f64 / 100.0);
            assert!(s >= prev);
            prev = s;
        }
        assert_eq!(smooth_step(1.2), 1.0);
        assert!((smooth_step(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_orbit_exponents_are_the_quartic_roots() {
        let o = bar();
        let spec = indicial_roots(&o, &[0, 1]).unwrap();
        let m1 = &spec.mode(1).unwrap().exponents;
        for (g, e) in m1.iter().zip([13.5f64.sqrt(), 1.0, -1.0, -13.5f64.sqrt()]) {
            assert!((g - e).abs() < 1e-6, "{g} vs {e}");
        }
        let m0 = spec.mode(0).unwrap();
        assert!((m0.exponents[0] - 2.83766).abs() < 1e-5);
        assert!(m0.exponents[1].abs() < 1e-8 && m0.exponents[2].abs() < 1e-8);
        assert!(m0.jordan_flags.iter().all(|f| !f));
    }

    #[test]
    fn translation_mode_has_unit_exponents() {
        let o = orbit(0.5);
        let op = ModeOperator::new(&o, 1);
        let mono = monodromy(&op).unwrap();
        assert!((mono.determinant() - 1.0).abs() < 1e-8);
        let g = mono.exponents();
        assert!((g[1] - 1.0).abs() < 1e-6 && (g[2] + 1.0).abs() < 1e-6, "{g:?}");
        assert!((g[0] + g[3]).abs() < 1e-6);
    }

    #[test]
    fn dilation_mode_is_a_jordan_block() {
        let o = orbit(0.5);
        let m = mode_spectrum(&ModeOperator::new(&o, 0)).unwrap();
        assert_eq!(m.jordan_flags, vec![false, true, true, false]);
        // v' is a periodic solution: its data is fixed by the period map
        let mono = monodromy(&ModeOperator::new(&o, 0)).unwrap();
        let d = o.derivs(0.0);
        let x = Vector4::new(d[1], d[2], d[3], d[4]);
        // relative to |M|, which carries the e^{gamma T} instability
        let scale = mono.matrix().norm();
        assert!((mono.apply(&x) - x).norm() < 1e-10 * scale * x.norm());
    }

    #[test]
    fn generators_solve_their_mode_equations() {
        let o = orbit(0.5);
        let b = generators(&o).unwrap();
        for k in GeneratorKind::ALL {
            let r = b.residual(k, b.unit_window(k), 96).unwrap();
            assert!(r < 1e-6, "{}: {r:e}", k.label());
        }
        let up = b.measured_growth(GeneratorKind::OneMinus, 0.0, 4).unwrap();
        let down = b.measured_growth(GeneratorKind::OnePlus, 0.0, 4).unwrap();
        assert!((up - 1.0).abs() < 0.01 && (down + 1.0).abs() < 0.01);
    }

    #[test]
    fn eps_derivative_agrees_with_neighbouring_orbits() {
        let o = orbit(0.5);
        let b = generators(&o).unwrap();
        let ts: Vec<f64> = (0..=40).map(|i| -o.period + 0.05 * o.period * i as f64).collect();
        let fd = eps_derivative_fd(&o, 1e-4, &ts).unwrap();
        for (t, f) in ts.iter().zip(fd) {
            assert!((b.value(GeneratorKind::ZeroMinus, *t) - f).abs() < 1e-4);
        }
    }

    #[test]
    fn pairing_is_conserved_and_antisymmetric() {
        let o = orbit(0.5);
        let b = generators(&o).unwrap();
        assert!(b.pairing(GeneratorKind::ZeroMinus, GeneratorKind::ZeroMinus, 0.7).unwrap().abs() < 1e-14);
        assert!(b.pairing_variation(GeneratorKind::ZeroMinus, GeneratorKind::ZeroPlus, 0.1, 100).unwrap() < 1e-7);
        assert!(b.pairing_variation(GeneratorKind::OnePlus, GeneratorKind::OneMinus, 0.1, 100).unwrap() < 1e-7);
        assert!(b.pairing(GeneratorKind::ZeroPlus, GeneratorKind::OnePlus, 0.0).is_err());
    }

    #[test]
    fn deficiency_space_has_two_per_mode_direction() {
        let o = orbit(0.5);
        let b = generators(&o).unwrap();
        let els = deficiency_basis(&b, &CutoffSpec { t_start: 0.0, t_full: 2.0 }, 0.0, 20.0, 300).unwrap();
        assert_eq!(els.len(), 12);
        assert!(gram_sigma_min(&els) > 0.0);
        let far = els[0].field.mode(0).unwrap()[299];
        assert!((far - b.value(GeneratorKind::ZeroPlus, 20.0)).abs() < 1e-15);
    }

    #[test]
    fn spectrum_serialization_uses_fixed_names() {
        let spec = indicial_roots(&bar(), &[1]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&spec.to_json().unwrap()).unwrap();
        for key in ["eps", "n", "modes"] {
            assert!(v.get(key).is_some());
        }
        for key in ["l", "lambda", "exponents", "jordanFlags"] {
            assert!(v["modes"][0].get(key).is_some());
        }
        let csv = spectra_csv(&[spec]);
        assert_eq!(csv.lines().count(), 5);
    }
}
