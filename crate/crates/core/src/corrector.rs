//! Right inverse of the linearized operator on the neck and the fixed-point
//! correction of the approximate solution.
//!
//! The Jacobi operator of `v_m` is discretized mode by mode with the shared
//! finite-difference stencils; the potential `p cN v_m^{p-1}` couples modes
//! through the angular quadrature. At each cut the unknown is required to
//! lie in the span of the Floquet solutions decaying away from the neck
//! faster than `e^{-delta |s|}`. Slow directions (modes 0 and 1) are carried
//! by cut-off Jacobi fields at both cuts with free amplitudes `alpha`.
//!
//! The resulting system has a two-dimensional kernel per slow mode, the
//! global Jacobi fields. Sources on the left half of the neck are solved
//! with the right-cut amplitudes pinned to zero and vice versa, so each
//! slow response is absorbed at the nearer cut.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::delaunay::power;
use crate::error::{Error, Result};
use crate::fd::DiffOps;
use crate::gauges::{paneitz_cyl_apply_with, q_residual_with, CylField, GaugeConstants};
use crate::gluing::{rel_power_m1, rel_power_m2, weight, ApproxSolution, PerturbationOps};
use crate::jacobi::{generators, monodromy_at, smooth_step, GeneratorKind, ModeOperator};

pub const DEFAULT_DELTA: f64 = 1.5;
/// Default relative reduction of the defect.
pub const DEFAULT_REL_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 30;
/// Condition estimates above this are rejected.
pub const COND_LIMIT: f64 = 1e13;
/// Minimum distance between `delta` and any Floquet exponent.
const ROOT_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Picard,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CorrectorOptions {
    pub delta: f64,
    pub scheme: Scheme,
    /// Stop once the defect is below `tol` times its initial value.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CorrectorOptions {
    fn default() -> Self {
        Self { delta: DEFAULT_DELTA, scheme: Scheme::Picard, tol: DEFAULT_REL_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

/// A cut-off Jacobi field spanning one slow direction at one cut.
#[derive(Debug, Clone)]
pub struct DeficiencyField {
    pub l: usize,
    pub side: Side,
    pub kind: GeneratorKind,
    pub samples: Vec<f64>,
}

/// Boundary closure of one mode.
#[derive(Debug, Clone)]
pub struct ModeClosure {
    pub l: usize,
    /// Floquet exponents at the left cut.
    pub exponents: [f64; 4],
    /// Rows `c` with `c . (u, u', u'', u''') = 0` at the left cut.
    pub left: Vec<[f64; 4]>,
    pub right: Vec<[f64; 4]>,
}

/// Cut conditions and deficiency fields, independent of the linearization point.
#[derive(Debug, Clone)]
pub struct Closure {
    pub delta: f64,
    pub modes: Vec<ModeClosure>,
    pub deficiency: Vec<DeficiencyField>,
}

fn complement(q: &DMatrix<f64>) -> Vec<[f64; 4]> {
    let proj = DMatrix::<f64>::identity(4, 4) - q * q.transpose();
    let eig = proj.symmetric_eigen();
    (0..4)
        .filter(|&j| eig.eigenvalues[j] > 0.5)
        .map(|j| {
            let c = eig.eigenvectors.column(j);
            [c[0], c[1], c[2], c[3]]
        })
        .collect()
}

fn slow_kinds(l: usize) -> Option<[GeneratorKind; 2]> {
    match l {
        0 => Some([GeneratorKind::ZeroPlus, GeneratorKind::ZeroMinus]),
        1 => Some([GeneratorKind::OnePlus, GeneratorKind::OneMinus]),
        _ => None,
    }
}

impl Closure {
    pub fn new(approx: &ApproxSolution, delta: f64) -> Result<Self> {
        if !(delta > 1.0) {
            return Err(Error::domain(format!("delta = {delta} must exceed 1")));
        }
        let orbit = &approx.orbit;
        let period = orbit.period;
        let (s_min, s_max) = (approx.w.t_min, approx.w.t_max);
        if s_max - s_min < 1.5 * period {
            return Err(Error::Config("neck shorter than 1.5 periods".into()));
        }
        let basis = generators(orbit)?;
        let half = (approx.config.m as f64 + 0.5) * period;
        let modes = (0..=approx.lmax())
            .map(|l| {
                let op = ModeOperator::new(orbit, l);
                let left = monodromy_at(&op, s_min + half)?;
                let right = monodromy_at(&op, s_max + half)?;
                let exponents = left.exponents();
                if let Some(g) = exponents.iter().find(|g| (g.abs() - delta).abs() < ROOT_MARGIN) {
                    return Err(Error::domain(format!("delta = {delta} is too close to the exponent {g} of mode {l}")));
                }
                let k = exponents.iter().filter(|&&g| g > delta).count();
                let expected = if l <= 1 { 1 } else { 2 };
                if k != expected {
                    return Err(Error::domain(format!(
                        "delta = {delta} leaves {k} decaying directions in mode {l}; exponents {exponents:?}"
                    )));
                }
                Ok(ModeClosure {
                    l,
                    exponents,
                    left: complement(&left.dominant_subspace(k, true)),
                    right: complement(&right.dominant_subspace(k, false)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ss = approx.w.grid();
        let quarter = 0.25 * period;
        let chi_l: Vec<f64> = ss.iter().map(|&s| 1.0 - smooth_step((s - s_min - quarter) / (2.0 * quarter))).collect();
        let chi_r: Vec<f64> = ss.iter().map(|&s| 1.0 - smooth_step((s_max - s - quarter) / (2.0 * quarter))).collect();
        let mut deficiency = Vec::new();
        for l in 0..=approx.lmax().min(1) {
            for side in [Side::Left, Side::Right] {
                for kind in slow_kinds(l).expect("slow mode") {
                    let samples = ss
                        .iter()
                        .enumerate()
                        .map(|(i, &s)| match side {
                            Side::Left => chi_l[i] * basis.value(kind, s + half),
                            Side::Right => chi_r[i] * basis.value(kind, half - s),
                        })
                        .collect();
                    deficiency.push(DeficiencyField { l, side, kind, samples });
                }
            }
        }
        Ok(Self { delta, modes, deficiency })
    }
}

/// The discretized Jacobi operator of `v_m + u`.
#[derive(Debug, Clone)]
pub struct NeckOperator {
    pub consts: GaugeConstants,
    pub n_t: usize,
    pub lmax: usize,
    proto: CylField,
    ops: DiffOps,
    /// `coupling[i][l][l']`, the potential from mode `l'` into mode `l` at node `i`.
    coupling: Vec<Vec<Vec<f64>>>,
}

impl NeckOperator {
    pub fn new(approx: &ApproxSolution, u: Option<&CylField>) -> Result<Self> {
        let pops = approx.perturbation_ops()?;
        let lmax = approx.lmax();
        let w = match u {
            Some(u) => approx.w.axpy(1.0, u)?,
            None => approx.w.clone(),
        };
        let c = pops.consts;
        let quad = &pops.quad;
        let coupling = (0..w.n_t)
            .map(|i| {
                let pts = quad.reconstruct(&w.coeffs_at(i));
                let pot: Vec<f64> = pts
                    .iter()
                    .map(|x| {
                        let v = pops.base[i] + x;
                        if v > 0.0 {
                            Ok(c.jacobi_coeff() * power(v, c.p - 1.0))
                        } else {
                            Err(Error::domain(format!("linearization point is not positive at s = {}", w.t_at(i))))
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok((0..=lmax)
                    .map(|l| {
                        (0..=lmax)
                            .map(|lp| {
                                let f: Vec<f64> =
                                    pot.iter().enumerate().map(|(j, v)| v * quad.basis_value(lp, j)).collect();
                                quad.project(&f, l)
                            })
                            .collect()
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { consts: c, n_t: w.n_t, lmax, proto: w.zeros_like(), ops: pops.ops, coupling })
    }

    fn lambda(&self, l: usize) -> f64 {
        self.proto.modes[l].lambda
    }

    /// `L u` at every node.
    pub fn apply(&self, u: &CylField) -> Result<CylField> {
        if !self.proto.same_grid(u) {
            return Err(Error::Grid("field does not match the neck grid".into()));
        }
        let mut out = self.proto.clone();
        for l in 0..=self.lmax {
            let ul = u.mode(l).unwrap_or(&[]);
            let (d2, d4) = if ul.is_empty() {
                (vec![0.0; self.n_t], vec![0.0; self.n_t])
            } else {
                (self.ops.derivative(ul, 2), self.ops.derivative(ul, 4))
            };
            let a = self.consts.mode_second(self.lambda(l));
            let b = self.consts.mode_constant(self.lambda(l));
            let samples = (0..self.n_t)
                .map(|i| {
                    let own = if ul.is_empty() { 0.0 } else { d4[i] - a * d2[i] + b * ul[i] };
                    let pot: f64 = (0..=self.lmax)
                        .filter_map(|lp| u.mode(lp).map(|m| self.coupling[i][l][lp] * m[i]))
                        .sum();
                    own - pot
                })
                .collect();
            out.set_mode(l, samples)?;
        }
        Ok(out)
    }

    fn col(&self, l: usize, i: usize) -> usize {
        l * self.n_t + i
    }

    /// Add the row of `L` for mode `l` at node `i` into `row` of `a`.
    fn fill_operator_row(&self, a: &mut DMatrix<f64>, row: usize, l: usize, i: usize, col_scale: &dyn Fn(usize) -> f64) {
        let am = self.consts.mode_second(self.lambda(l));
        let bm = self.consts.mode_constant(self.lambda(l));
        let (s4, w4) = self.ops.row(4, i);
        for (j, w) in w4.iter().enumerate() {
            a[(row, self.col(l, s4 + j))] += w * col_scale(s4 + j);
        }
        let (s2, w2) = self.ops.row(2, i);
        for (j, w) in w2.iter().enumerate() {
            a[(row, self.col(l, s2 + j))] -= am * w * col_scale(s2 + j);
        }
        a[(row, self.col(l, i))] += bm * col_scale(i);
        for lp in 0..=self.lmax {
            a[(row, self.col(lp, i))] -= self.coupling[i][l][lp] * col_scale(i);
        }
    }

    /// Add `c . (u, u', u'', u''')` at node `i` of mode `l` into `row`.
    fn fill_state_row(&self, a: &mut DMatrix<f64>, row: usize, l: usize, i: usize, c: &[f64; 4], col_scale: &dyn Fn(usize) -> f64) {
        a[(row, self.col(l, i))] += c[0] * col_scale(i);
        for (k, ck) in c.iter().enumerate().skip(1) {
            let (start, w) = self.ops.row(k, i);
            for (j, wj) in w.iter().enumerate() {
                a[(row, self.col(l, start + j))] += ck * wj * col_scale(start + j);
            }
        }
    }

    /// Square matrix with `u` and `u'` clamped at both ends of every mode.
    pub fn clamped_matrix(&self) -> DMatrix<f64> {
        let n = self.n_t;
        let dim = n * (self.lmax + 1);
        let mut a = DMatrix::zeros(dim, dim);
        let one = |_: usize| 1.0;
        for l in 0..=self.lmax {
            for i in 0..n {
                let row = self.col(l, i);
                match i {
                    0 | 1 => self.fill_state_row(&mut a, row, l, 0, &unit(i), &one),
                    _ if i + 2 >= n => self.fill_state_row(&mut a, row, l, n - 1, &unit(n - 1 - i), &one),
                    _ => self.fill_operator_row(&mut a, row, l, i, &one),
                }
            }
        }
        a
    }
}

fn unit(k: usize) -> [f64; 4] {
    let mut c = [0.0; 4];
    c[k] = 1.0;
    c
}

/// Which rows of the bordered system carry which equation.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RowKind {
    Interior { l: usize, i: usize },
    Constraint,
}

#[derive(Debug, Clone)]
struct Bordered {
    a: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rows: Vec<RowKind>,
    row_scale: Vec<f64>,
    cond: f64,
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Hager's estimate of `||A^{-1}||_1`.
fn inverse_norm1_estimate(
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lut: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
) -> Option<f64> {
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let y = lu.solve(&x)?;
        est = y.iter().map(|v| v.abs()).sum();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = lut.solve(&xi)?;
        let (jmax, zmax) = z.iter().enumerate().fold((0, 0.0), |acc, (j, v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[jmax] = 1.0;
    }
    Some(est)
}

impl Bordered {
    fn build(op: &NeckOperator, closure: &Closure, applied: &[CylField], absorb: Side) -> Result<Self> {
        let n = op.n_t;
        let n_alpha = closure.deficiency.len();
        let dim = n * (op.lmax + 1) + n_alpha;
        let mut a = DMatrix::zeros(dim, dim);
        let mut rows = Vec::with_capacity(dim);
        let one = |_: usize| 1.0;
        for mc in &closure.modes {
            let l = mc.l;
            for i in 2..n - 2 {
                let r = rows.len();
                op.fill_operator_row(&mut a, r, l, i, &one);
                for (d, f) in applied.iter().enumerate() {
                    if let Some(m) = f.mode(l) {
                        a[(r, n * (op.lmax + 1) + d)] = m[i];
                    }
                }
                rows.push(RowKind::Interior { l, i });
            }
            for (cut, conds) in [(0, &mc.left), (n - 1, &mc.right)] {
                for c in conds {
                    let r = rows.len();
                    op.fill_state_row(&mut a, r, l, cut, c, &one);
                    rows.push(RowKind::Constraint);
                }
            }
        }
        for (d, def) in closure.deficiency.iter().enumerate() {
            if def.side != absorb {
                let r = rows.len();
                a[(r, n * (op.lmax + 1) + d)] = 1.0;
                rows.push(RowKind::Constraint);
            }
        }
        if rows.len() != dim {
            return Err(Error::numerical(format!("bordered system has {} rows for {dim} unknowns", rows.len())));
        }
        let row_scale: Vec<f64> = (0..dim)
            .map(|r| {
                let m = a.row(r).iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
                if m > 0.0 { 1.0 / m } else { 1.0 }
            })
            .collect();
        for (r, s) in row_scale.iter().enumerate() {
            a.row_mut(r).scale_mut(*s);
        }
        let lut = a.transpose().lu();
        let anorm = norm1(&a);
        let lu = a.clone().lu();
        let cond = inverse_norm1_estimate(&lu, &lut, dim)
            .map(|e| anorm * e)
            .unwrap_or(f64::INFINITY);
        if !(cond < COND_LIMIT) {
            return Err(Error::IllConditioned { cond });
        }
        Ok(Self { a, lu, rows, row_scale, cond })
    }

    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let b = DVector::from_iterator(rhs.len(), rhs.iter().zip(&self.row_scale).map(|(x, s)| x * s));
        let solve = |b: &DVector<f64>| self.lu.solve(b).ok_or_else(|| Error::numerical("singular bordered system"));
        let mut x = solve(&b)?;
        for _ in 0..2 {
            let res = &b - &self.a * &x;
            x += solve(&res)?;
        }
        Ok(x)
    }
}

/// Amplitude of one deficiency direction in a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeficiencyAmplitude {
    pub l: usize,
    pub side: Side,
    pub kind: GeneratorKind,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Correction {
    /// Total solution including the cut-off Jacobi fields.
    pub field: CylField,
    pub alpha: Vec<DeficiencyAmplitude>,
}

/// Right inverse `G` of the linearization at one point.
#[derive(Debug, Clone)]
pub struct RightInverse {
    pub op: NeckOperator,
    pub closure: Closure,
    left: Bordered,
    right: Bordered,
    /// Node range where `L G f = f` holds.
    pub rows: std::ops::Range<usize>,
    s_grid: Vec<f64>,
    h: f64,
}

impl RightInverse {
    pub fn new(approx: &ApproxSolution, closure: &Closure, u: Option<&CylField>) -> Result<Self> {
        let op = NeckOperator::new(approx, u)?;
        let applied = closure
            .deficiency
            .iter()
            .map(|d| {
                let mut f = op.proto.clone();
                f.set_mode(d.l, d.samples.clone())?;
                op.apply(&f)
            })
            .collect::<Result<Vec<_>>>()?;
        let (left, right) = rayon::join(
            || Bordered::build(&op, closure, &applied, Side::Left),
            || Bordered::build(&op, closure, &applied, Side::Right),
        );
        let s_grid = op.proto.grid();
        let h = op.proto.spacing();
        Ok(Self { rows: 2..op.n_t - 2, op, closure: closure.clone(), left: left?, right: right?, s_grid, h })
    }

    pub fn cond_estimates(&self) -> [f64; 2] {
        [self.left.cond, self.right.cond]
    }

    fn share(&self, i: usize, side: Side) -> f64 {
        let s = self.s_grid[i];
        if s.abs() < 0.25 * self.h {
            0.5
        } else if (s < 0.0) == (side == Side::Left) {
            1.0
        } else {
            0.0
        }
    }

    /// `G f`; only the values of `f` on [`Self::rows`] are used.
    pub fn apply(&self, f: &CylField) -> Result<Correction> {
        if !self.op.proto.same_grid(f) {
            return Err(Error::Grid("source does not match the neck grid".into()));
        }
        let n = self.op.n_t;
        let n_u = n * (self.op.lmax + 1);
        let mut x_total = DVector::zeros(n_u + self.closure.deficiency.len());
        for (side, sys) in [(Side::Left, &self.left), (Side::Right, &self.right)] {
            let rhs = DVector::from_iterator(
                sys.rows.len(),
                sys.rows.iter().map(|r| match *r {
                    RowKind::Interior { l, i } => f.mode(l).map(|m| m[i]).unwrap_or(0.0) * self.share(i, side),
                    RowKind::Constraint => 0.0,
                }),
            );
            x_total += sys.solve(&rhs)?;
        }
        let mut field = self.op.proto.clone();
        for l in 0..=self.op.lmax {
            let mut m: Vec<f64> = (0..n).map(|i| x_total[l * n + i]).collect();
            for (d, def) in self.closure.deficiency.iter().enumerate() {
                if def.l == l {
                    let a = x_total[n_u + d];
                    for (mi, si) in m.iter_mut().zip(&def.samples) {
                        *mi += a * si;
                    }
                }
            }
            field.set_mode(l, m)?;
        }
        let alpha = self
            .closure
            .deficiency
            .iter()
            .enumerate()
            .map(|(d, def)| DeficiencyAmplitude { l: def.l, side: def.side, kind: def.kind, value: x_total[n_u + d] })
            .collect();
        Ok(Correction { field, alpha })
    }
}

impl RightInverse {
    /// `sup |L G f - f| / sup |f|` over the enforced rows.
    pub fn consistency(&self, f: &CylField) -> Result<f64> {
        let g = self.apply(f)?;
        let lg = self.op.apply(&g.field)?;
        let diff = lg.axpy(-1.0, f)?;
        let denom = f.sup_norm_on(self.rows.clone());
        Ok(diff.sup_norm_on(self.rows.clone()) / denom.max(f64::MIN_POSITIVE))
    }

    /// Induced norm of `G` in the weighted sup norm with profile
    /// `cosh^delta(scale) / cosh^delta(s)`, from its full matrix.
    pub fn weighted_norm(&self, delta: f64, scale: f64) -> Result<f64> {
        let n = self.op.n_t;
        let lmax = self.op.lmax;
        let w: Vec<f64> = self.s_grid.iter().map(|&s| weight(s, delta, scale)).collect();
        let mut row_sums = vec![0.0; n * (lmax + 1)];
        let mut unit = self.op.proto.clone();
        for lj in 0..=lmax {
            for j in self.rows.clone() {
                unit.modes[lj].samples[j] = 1.0;
                let col = self.apply(&unit)?.field;
                unit.modes[lj].samples[j] = 0.0;
                for (li, m) in col.modes.iter().enumerate() {
                    for (i, g) in m.samples.iter().enumerate() {
                        row_sums[li * n + i] += g.abs() * w[i] / w[j];
                    }
                }
            }
        }
        Ok(row_sums.into_iter().fold(0.0, f64::max))
    }
}

/// Apply `f(v_m, u / v_m)` at the angular nodes and project back.
fn pointwise_about(pops: &PerturbationOps, w: &CylField, u: &CylField, f: impl Fn(f64, f64) -> f64) -> Result<CylField> {
    let lmax = w.lmax().max(u.lmax());
    let mut out = w.zeros_like();
    let mut modes = vec![Vec::with_capacity(w.n_t); lmax + 1];
    let mut vals = vec![0.0; pops.quad.num_nodes()];
    for i in 0..w.n_t {
        let wp = pops.quad.reconstruct(&w.coeffs_at(i));
        let up = pops.quad.reconstruct(&u.coeffs_at(i));
        for ((dst, wx), ux) in vals.iter_mut().zip(&wp).zip(&up) {
            let vm = pops.base[i] + wx;
            let x = ux / vm;
            if !(vm > 0.0 && x > -1.0) {
                return Err(Error::domain(format!("field is not positive at s = {}", w.t_at(i))));
            }
            *dst = f(vm, x);
        }
        for (l, m) in modes.iter_mut().enumerate() {
            m.push(pops.quad.project(&vals, l));
        }
    }
    for (l, m) in modes.into_iter().enumerate() {
        out.set_mode(l, m)?;
    }
    Ok(out)
}

/// `R(u) = N(v_m + u) - N(v_m) - L u`, evaluated without cancellation.
pub fn remainder(approx: &ApproxSolution, u: &CylField) -> Result<CylField> {
    let pops = approx.perturbation_ops()?;
    remainder_with(&pops, &approx.w, u)
}

fn remainder_with(pops: &PerturbationOps, w: &CylField, u: &CylField) -> Result<CylField> {
    let c = pops.consts;
    pointwise_about(pops, w, u, |vm, x| -c.c_n * power(vm, c.p) * rel_power_m2(x, c.p))
}

/// `N(v_m + u) - N(v_m)`.
fn increment(pops: &PerturbationOps, w: &CylField, u: &CylField) -> Result<CylField> {
    let c = pops.consts;
    let pu = paneitz_cyl_apply_with(u, &pops.ops)?;
    let nl = pointwise_about(pops, w, u, |vm, x| c.c_n * power(vm, c.p) * rel_power_m1(x, c.p))?;
    pu.axpy(-1.0, &nl)
}

/// Fitted exponent of `||R(s u)||` against `s`.
pub fn remainder_order(approx: &ApproxSolution, u: &CylField, scales: &[f64]) -> Result<f64> {
    if scales.len() < 2 {
        return Err(Error::domain("need at least two scales"));
    }
    let pops = approx.perturbation_ops()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &s in scales {
        let r = remainder_with(&pops, &approx.w, &u.scaled(s))?;
        xs.push(s.ln());
        ys.push(r.sup_norm().ln());
    }
    Ok(crate::delaunay::linear_fit(&xs, &ys).0)
}

/// Smallest singular value of the Jacobi operator of `v_m` conjugated by the
/// weight profile, restricted to the decaying cut conditions.
/// The linearization point is `v_m + u`.
pub fn nondegeneracy_diag(approx: &ApproxSolution, u: Option<&CylField>, delta: f64) -> Result<f64> {
    let closure = Closure::new(approx, delta)?;
    nondegeneracy_with(approx, u, &closure)
}

fn nondegeneracy_with(approx: &ApproxSolution, u: Option<&CylField>, closure: &Closure) -> Result<f64> {
    let op = NeckOperator::new(approx, u)?;
    let n = op.n_t;
    let h = approx.spacing();
    let scale = approx.weight_scale();
    // bound `|u| <= rho`: largest mid-neck, decaying towards the cuts
    let rho: Vec<f64> = approx.w.grid().iter().map(|&s| weight(s, closure.delta, scale)).collect();
    let cols = n * (op.lmax + 1);
    let n_cond: usize = closure.modes.iter().map(|m| m.left.len() + m.right.len()).sum();
    let mut a = DMatrix::zeros((n - 4) * (op.lmax + 1) + n_cond, cols);
    let col_scale = |j: usize| rho[j];
    let mut r = 0;
    for mc in &closure.modes {
        for i in 2..n - 2 {
            op.fill_operator_row(&mut a, r, mc.l, i, &col_scale);
            a.row_mut(r).scale_mut(1.0 / rho[i]);
            r += 1;
        }
        for (cut, conds) in [(0, &mc.left), (n - 1, &mc.right)] {
            for c in conds {
                op.fill_state_row(&mut a, r, mc.l, cut, c, &col_scale);
                a.row_mut(r).scale_mut(1.0 / (rho[cut] * h.sqrt()));
                r += 1;
            }
        }
    }
    let sv = a.svd(false, false).singular_values;
    Ok(sv.iter().copied().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceRow {
    pub k: usize,
    pub defect_sup: f64,
    pub corr_sup: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Diagnostics {
    pub sigma_min: f64,
    pub cond_estimates: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CorrectionReport {
    /// `v_m + u`.
    pub field: CylField,
    pub correction: CylField,
    pub alpha: Vec<DeficiencyAmplitude>,
    pub trace: Vec<TraceRow>,
    pub initial_defect: f64,
    /// Q-curvature defect of `v_m + u`, recomputed from the nonlinear
    /// increment rather than the linear solve.
    pub final_defect: f64,
    /// The same defect evaluated on the full fields, limited by rounding.
    pub full_form_residual: f64,
    /// Reached `tol`, or stalled at the rounding floor below
    /// `DEFAULT_REL_TOL` times the initial defect.
    pub converged: bool,
    /// The iteration stopped because the defect no longer decreased.
    pub floor_limited: bool,
    pub diagnostics: Diagnostics,
}

/// Picard or Newton correction of `v_m`.
pub fn correct(approx: &ApproxSolution, opts: &CorrectorOptions) -> Result<CorrectionReport> {
    if !(opts.tol > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    let pops = approx.perturbation_ops()?;
    let source = approx.source(&pops)?;
    let f0 = approx.residual_with(&pops, &source, None)?;
    let closure = Closure::new(approx, opts.delta)?;
    let g0 = RightInverse::new(approx, &closure, None)?;
    let rows = g0.rows.clone();
    let w = &approx.w;
    let defect_of = |u: &CylField| -> Result<(CylField, f64)> {
        let f = f0.axpy(1.0, &increment(&pops, w, u)?)?;
        let psi = pops.q_normalize(&w.axpy(1.0, u)?, &f, approx.lmax())?;
        let d = psi.sup_norm_on(rows.clone());
        Ok((f, d))
    };
    let mut u = w.zeros_like();
    let mut alpha = Vec::new();
    let (mut f_u, d0) = defect_of(&u)?;
    let mut trace = vec![TraceRow { k: 0, defect_sup: d0, corr_sup: 0.0, ratio: None }];
    let mut converged = d0 == 0.0;
    let mut prev_step: Option<f64> = None;
    let mut bad = 0;
    let mut last = d0;
    let mut floor_limited = false;
    for k in 1..=opts.max_iter {
        if converged {
            break;
        }
        let next = match opts.scheme {
            Scheme::Picard => {
                let rhs = f0.axpy(1.0, &remainder_with(&pops, w, &u)?)?;
                let c = g0.apply(&rhs)?;
                alpha = c.alpha.iter().map(|a| DeficiencyAmplitude { value: -a.value, ..a.clone() }).collect();
                c.field.scaled(-1.0)
            }
            Scheme::Newton => {
                let gk = if k == 1 { g0.clone() } else { RightInverse::new(approx, &closure, Some(&u))? };
                let c = gk.apply(&f_u)?;
                for (acc, a) in alpha_accumulate(&mut alpha, &c.alpha) {
                    acc.value -= a.value;
                }
                u.axpy(-1.0, &c.field)?
            }
        };
        let step = next.axpy(-1.0, &u)?.sup_norm();
        let ratio = prev_step.filter(|p| *p > 0.0).map(|p| step / p);
        u = next;
        let (f_next, d) = defect_of(&u)?;
        f_u = f_next;
        trace.push(TraceRow { k, defect_sup: d, corr_sup: u.sup_norm(), ratio });
        if ratio.is_some_and(|r| r >= 1.0) {
            bad += 1;
            if bad >= 3 {
                return Err(Error::Diverged { iterations: k, last_ratio: ratio.unwrap_or(f64::NAN) });
            }
        } else {
            bad = 0;
        }
        if d <= opts.tol * d0 {
            converged = true;
            break;
        }
        // at the rounding floor the defect stops decreasing
        if step == 0.0 || (k >= 3 && d >= last) {
            floor_limited = true;
            converged = trace.iter().map(|t| t.defect_sup).fold(f64::INFINITY, f64::min) <= DEFAULT_REL_TOL * d0;
            break;
        }
        last = d;
        prev_step = Some(step);
    }
    let final_defect = trace.last().map(|t| t.defect_sup).unwrap_or(d0);
    let full_form_residual = full_form(approx, &pops, &u)?;
    let diagnostics = Diagnostics {
        sigma_min: nondegeneracy_with(approx, Some(&u), &closure)?,
        cond_estimates: g0.cond_estimates().to_vec(),
    };
    let mut field = approx.field();
    field = field.axpy(1.0, &u)?;
    Ok(CorrectionReport { field, correction: u, alpha, trace, initial_defect: d0, final_defect, full_form_residual, converged, floor_limited, diagnostics })
}

fn alpha_accumulate<'a>(
    acc: &'a mut Vec<DeficiencyAmplitude>,
    step: &'a [DeficiencyAmplitude],
) -> impl Iterator<Item = (&'a mut DeficiencyAmplitude, &'a DeficiencyAmplitude)> {
    if acc.is_empty() {
        *acc = step.iter().map(|a| DeficiencyAmplitude { value: 0.0, ..a.clone() }).collect();
    }
    acc.iter_mut().zip(step)
}

/// Source-subtracted Q defect of `v_m + u` from the plain residuals of the
/// three full fields, sup over centred-stencil nodes.
fn full_form(approx: &ApproxSolution, pops: &PerturbationOps, u: &CylField) -> Result<f64> {
    let base = approx.base_field();
    let full = |w: &CylField| -> Result<CylField> { Ok(q_residual_with(&base.axpy(1.0, w)?, &pops.ops)?.residual) };
    let wu = approx.w.axpy(1.0, u)?;
    let rm = full(&wu)?;
    let r1 = full(&approx.w1)?;
    let r2 = full(&approx.w2)?;
    let mut combined = rm.clone();
    for l in 0..=approx.lmax() {
        let (a, b, c) = (rm.mode(l).expect("mode"), r1.mode(l).expect("mode"), r2.mode(l).expect("mode"));
        combined.set_mode(l, (0..a.len()).map(|i| a[i] - approx.chi[i] * b[i] - (1.0 - approx.chi[i]) * c[i]).collect())?;
    }
    let psi = pops.q_normalize(&wu, &combined, approx.lmax())?;
    let r = pops.ops.half_width();
    Ok(psi.sup_norm_on(r..psi.n_t - r))
}

impl CorrectionReport {
    /// Columns `k,defectSup,corrSup,ratio`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("k,defectSup,corrSup,ratio\n");
        for t in &self.trace {
            let ratio = t.ratio.map(|r| r.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", t.k, t.defect_sup, t.corr_sup, ratio));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gluing::{build_approximate, defect, EndData, GluingConfig, GridSpec, PerturbationTerm};

    fn config(m: usize, amplitude: f64) -> GluingConfig {
        let mut c = GluingConfig { n: 5, eps: 0.5, m, r0: 1.0, end1: EndData::default(), end2: EndData::default() };
        if amplitude != 0.0 {
            c.end1.perturbation.push(PerturbationTerm { l: 0, amplitude, beta: 2.0 });
        }
        c
    }

    #[test]
    fn right_inverse_solves_the_linear_problem() {
        let approx = build_approximate(&config(2, 1e-3), &GridSpec::default()).unwrap();
        let closure = Closure::new(&approx, DEFAULT_DELTA).unwrap();
        let g = RightInverse::new(&approx, &closure, None).unwrap();
        let psi = defect(&approx, DEFAULT_DELTA).unwrap().psi;
        assert!(g.consistency(&psi).unwrap() < 1e-10);
        let bumps = CylField::radial(5, approx.w.t_min, approx.w.t_max, approx.n_t(), |s| {
            (-(s - 3.0).powi(2)).exp() - 0.5 * (-(s + 7.0).powi(2) / 4.0).exp()
        })
        .unwrap();
        assert!(g.consistency(&bumps).unwrap() < 1e-10);
        assert!(g.cond_estimates().iter().all(|c| *c < COND_LIMIT));
    }

    #[test]
    fn symmetric_necks_give_reflection_symmetric_matrices() {
        let approx = build_approximate(&config(1, 0.0), &GridSpec::default()).unwrap();
        let a = NeckOperator::new(&approx, None).unwrap().clamped_matrix();
        let n = a.nrows();
        let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut worst = 0.0f64;
        for i in 0..n {
            // the u' clamp rows are odd under reflection
            let sign = if i == 1 || i == n - 2 { -1.0 } else { 1.0 };
            for j in 0..n {
                worst = worst.max((a[(i, j)] - sign * a[(n - 1 - i, n - 1 - j)]).abs());
            }
        }
        assert!(worst < 1e-10 * scale, "asymmetry {worst:e}");
    }

    #[test]
    fn remainder_is_quadratic() {
        let approx = build_approximate(&config(1, 1e-3), &GridSpec::default()).unwrap();
        let probe = approx.base_field().scaled(0.1);
        let order = remainder_order(&approx, &probe, &[1e-2, 1e-3, 1e-4]).unwrap();
        assert!((order - 2.0).abs() < 0.05, "order {order}");
        // agrees with the defining difference where it does not cancel
        let pops = approx.perturbation_ops().unwrap();
        let op = NeckOperator::new(&approx, None).unwrap();
        let u = probe.scaled(0.05);
        let direct = increment(&pops, &approx.w, &u).unwrap().axpy(-1.0, &op.apply(&u).unwrap()).unwrap();
        let r = remainder(&approx, &u).unwrap();
        assert!(direct.axpy(-1.0, &r).unwrap().sup_norm() < 1e-9 * r.sup_norm());
    }

    #[test]
    fn exact_ends_need_no_correction() {
        let approx = build_approximate(&config(1, 0.0), &GridSpec::default()).unwrap();
        let rep = correct(&approx, &CorrectorOptions::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.trace.len(), 1);
        assert_eq!(rep.correction.sup_norm(), 0.0);
    }

    #[test]
    fn picard_and_newton_reduce_the_defect() {
        let approx = build_approximate(&config(2, 1e-3), &GridSpec::default()).unwrap();
        for scheme in [Scheme::Picard, Scheme::Newton] {
            let rep = correct(&approx, &CorrectorOptions { scheme, ..Default::default() }).unwrap();
            assert!(rep.converged, "{scheme:?}");
            assert!(rep.final_defect < 1e-6 * rep.initial_defect);
            assert!(rep.full_form_residual < 1e-8);
            assert!(rep.diagnostics.sigma_min > 0.0);
            assert!(rep.trace_csv().starts_with("k,defectSup,corrSup,ratio\n"));
        }
    }

    #[test]
    fn delta_outside_the_window_is_rejected() {
        let approx = build_approximate(&config(1, 0.0), &GridSpec::default()).unwrap();
        assert!(matches!(Closure::new(&approx, 0.9), Err(Error::Domain(_))));
        assert!(matches!(Closure::new(&approx, 3.0), Err(Error::Domain(_))));
    }
}
