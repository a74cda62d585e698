//! Approximate solutions on the glued neck and their Q-curvature defect.
//!
//! Two ends with the same necksize are cut at `T_0^i + (m + 1/2) T` and
//! identified through `t + tau = T_0^1 + T_0^2 + (2m + 1) T`. Fields live on
//! the centred coordinate `s = t - T_0^1 - (m + 1/2) T`, so the domain is
//! `[-T_0^1 - (m + 1/2) T, T_0^2 + (m + 1/2) T]` and the cutoff switches over
//! `|s| <= T/4`.
//!
//! Both ends share the base orbit `v_b(s) = v_eps(s + (m + 1/2) T)` exactly,
//! so every field is stored as `v_b + w` and residuals are evaluated on the
//! perturbation `w` directly: the defect of the glued metric is many orders
//! of magnitude below `|v_b|` and would otherwise drown in rounding.
//!
//! End data `v_i = v_b + w_0^i` are treated as exact on their own summands,
//! their residual acting as a source. The defect of `v_m` is measured
//! relative to the blended source `chi F(w_1) + (1 - chi) F(w_2)`, which
//! makes it vanish wherever `chi` is locally constant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::angular::AngularQuadrature;
use crate::delaunay::{linear_fit, power, solve_orbit, DelaunayOrbit, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::fd::{DiffOps, DEFAULT_HALF_WIDTH};
use crate::gauges::{derive_constants, paneitz_cyl_apply_with, CylField, Dimension, GaugeConstants};
use crate::jacobi::smooth_step;

/// Norms below this count as zero in decay studies.
pub const DEFECT_FLOOR: f64 = 1e-300;

/// One term `A e^{-beta t} Z_l` of an end perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationTerm {
    pub l: usize,
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub beta: f64,
}

/// Asymptotic data of one end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EndData {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(rename = "T0", default)]
    pub t0: f64,
    #[serde(default)]
    pub a: Vec<f64>,
    #[serde(default)]
    pub perturbation: Vec<PerturbationTerm>,
}

fn default_r0() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GluingConfig {
    pub n: usize,
    pub eps: f64,
    pub m: usize,
    #[serde(default = "default_r0")]
    pub r0: f64,
    pub end1: EndData,
    pub end2: EndData,
}

fn default_ppp() -> usize {
    64
}

/// Sampling of the neck.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_ppp")]
    pub points_per_period: usize,
    /// Highest retained mode.
    #[serde(default)]
    pub lmax: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points_per_period: 64, lmax: 0 }
    }
}

impl GluingConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Check the invariants and return the gauge constants.
    pub fn validate(&self) -> Result<GaugeConstants> {
        let consts = derive_constants(Dimension::new(self.n)?);
        if !(self.eps > 0.0 && self.eps <= consts.eps_bar * (1.0 + 1e-12)) {
            return Err(Error::Config(format!("eps = {} outside (0, {}]", self.eps, consts.eps_bar)));
        }
        if self.m < 1 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.r0 > 0.0) {
            return Err(Error::Config("r0 must be positive".into()));
        }
        for (name, end) in [("end1", &self.end1), ("end2", &self.end2)] {
            if let Some(e) = end.eps {
                if (e - self.eps).abs() > 1e-12 * self.eps {
                    return Err(Error::Config(format!("{name} has necksize {e}, the neck has {}", self.eps)));
                }
            }
            if !end.t0.is_finite() {
                return Err(Error::Config(format!("{name}.T0 must be finite")));
            }
            if !end.a.is_empty() && end.a.len() != self.n {
                return Err(Error::Config(format!("{name}.a must have {} components", self.n)));
            }
            if end.a.iter().any(|x| *x != 0.0) {
                return Err(Error::Config(format!("{name}: only untranslated ends (a = 0) are supported")));
            }
            for term in &end.perturbation {
                if !(term.beta > 1.0) || !term.amplitude.is_finite() {
                    return Err(Error::Config(format!("{name}: perturbation rates must exceed 1")));
                }
            }
        }
        Ok(consts)
    }

    /// Highest mode carried by the perturbations.
    pub fn perturbation_lmax(&self) -> usize {
        self.end1
            .perturbation
            .iter()
            .chain(&self.end2.perturbation)
            .map(|p| p.l)
            .max()
            .unwrap_or(0)
    }
}

/// `tau = T_0^1 + T_0^2 + (2m + 1) T - t`.
pub fn identify(t: f64, cfg: &GluingConfig, period: f64) -> f64 {
    cfg.end1.t0 + cfg.end2.t0 + (2 * cfg.m + 1) as f64 * period - t
}

/// Cutoff in the end-1 coordinate: `1` up to `T_0^1 + (m + 1/4) T`, `0` from
/// `T_0^1 + (m + 3/4) T`.
pub fn cutoff_chi(t: f64, cfg: &GluingConfig, period: f64) -> f64 {
    let start = cfg.end1.t0 + (cfg.m as f64 + 0.25) * period;
    1.0 - smooth_step((t - start) / (0.5 * period))
}

/// `(1 + x)^p - 1`, accurate for small `x`.
pub(crate) fn rel_power_m1(x: f64, p: f64) -> f64 {
    (p * x.ln_1p()).exp_m1()
}

/// `(1 + x)^p - 1 - p x`, accurate for small `x`.
pub(crate) fn rel_power_m2(x: f64, p: f64) -> f64 {
    if x.abs() < 1e-3 {
        let mut term = p * (p - 1.0) / 2.0 * x * x;
        let mut sum = term;
        for k in 3..=8 {
            term *= (p - (k - 1) as f64) / k as f64 * x;
            sum += term;
        }
        sum
    } else {
        rel_power_m1(x, p) - p * x
    }
}

/// Shared machinery for residuals of `v_b + w`.
#[derive(Debug, Clone)]
pub(crate) struct PerturbationOps {
    pub consts: GaugeConstants,
    pub ops: DiffOps,
    pub quad: AngularQuadrature,
    pub base: Vec<f64>,
}

impl PerturbationOps {
    pub fn new(consts: GaugeConstants, base: Vec<f64>, h: f64, lmax: usize) -> Result<Self> {
        let ops = DiffOps::new(base.len(), h, DEFAULT_HALF_WIDTH)?;
        let quad = AngularQuadrature::new(consts.n, lmax.max(1));
        Ok(Self { consts, ops, quad, base })
    }

    /// `P w - cN ((v_b + w)^p - v_b^p)`, the residual of `v_b + w` when
    /// `v_b` is exact.
    pub fn residual(&self, w: &CylField, lmax: usize) -> Result<CylField> {
        let pw = paneitz_cyl_apply_with(w, &self.ops)?;
        let c = &self.consts;
        let nl = self.pointwise(w, lmax, |vb, x| c.c_n * power(vb, c.p) * rel_power_m1(x, c.p))?;
        pw.axpy(-1.0, &nl)
    }

    /// Project `f(v_b, w / v_b)` at the angular nodes onto modes `0..=lmax`.
    pub fn pointwise(&self, w: &CylField, lmax: usize, f: impl Fn(f64, f64) -> f64) -> Result<CylField> {
        let mut out = CylField::new(w.n, w.t_min, w.t_max, w.n_t)?;
        let mut modes = vec![Vec::with_capacity(w.n_t); lmax + 1];
        let mut vals = vec![0.0; self.quad.num_nodes()];
        for i in 0..w.n_t {
            let vb = self.base[i];
            let pts = self.quad.reconstruct(&w.coeffs_at(i));
            for (dst, wx) in vals.iter_mut().zip(&pts) {
                let x = wx / vb;
                if !(x > -1.0) {
                    return Err(Error::domain(format!("field is not positive at s = {}", w.t_at(i))));
                }
                *dst = f(vb, x);
            }
            for (l, m) in modes.iter_mut().enumerate() {
                m.push(self.quad.project(&vals, l));
            }
        }
        for (l, m) in modes.into_iter().enumerate() {
            out.set_mode(l, m)?;
        }
        Ok(out)
    }

    /// Q-curvature deviation `(2/(n-4)) v^{-p} r` for a residual `r` of `v_b + w`.
    pub fn q_normalize(&self, w: &CylField, r: &CylField, lmax: usize) -> Result<CylField> {
        let c = &self.consts;
        let mut out = CylField::new(w.n, w.t_min, w.t_max, w.n_t)?;
        let mut modes = vec![Vec::with_capacity(w.n_t); lmax + 1];
        let mut vals = vec![0.0; self.quad.num_nodes()];
        for i in 0..w.n_t {
            let vb = self.base[i];
            let wp = self.quad.reconstruct(&w.coeffs_at(i));
            let rp = self.quad.reconstruct(&r.coeffs_at(i));
            for ((dst, wx), rx) in vals.iter_mut().zip(&wp).zip(&rp) {
                let v = vb + wx;
                if !(v > 0.0) {
                    return Err(Error::domain(format!("field is not positive at s = {}", w.t_at(i))));
                }
                *dst = c.q_factor() * rx / power(v, c.p);
            }
            for (l, m) in modes.iter_mut().enumerate() {
                m.push(self.quad.project(&vals, l));
            }
        }
        for (l, m) in modes.into_iter().enumerate() {
            out.set_mode(l, m)?;
        }
        Ok(out)
    }
}

/// The glued approximate solution, stored as base orbit plus perturbations.
#[derive(Debug, Clone)]
pub struct ApproxSolution {
    pub config: GluingConfig,
    pub grid: GridSpec,
    pub orbit: DelaunayOrbit,
    /// `v_b` at the grid nodes.
    pub base: Vec<f64>,
    /// End-1 perturbation `w_0^1(t(s))`.
    pub w1: CylField,
    /// End-2 perturbation `w_0^2(tau(s))`.
    pub w2: CylField,
    /// Sampled cutoff.
    pub chi: Vec<f64>,
    /// `chi w1 + (1 - chi) w2`.
    pub w: CylField,
}

/// Sample `v_m` on the neck.
pub fn build_approximate(cfg: &GluingConfig, grid: &GridSpec) -> Result<ApproxSolution> {
    cfg.validate()?;
    let orbit = solve_orbit(Dimension::new(cfg.n)?, cfg.eps, DEFAULT_TOL)?;
    build_with_orbit(cfg, grid, orbit)
}

/// As [`build_approximate`] with a precomputed orbit of necksize `cfg.eps`.
pub fn build_with_orbit(cfg: &GluingConfig, grid: &GridSpec, orbit: DelaunayOrbit) -> Result<ApproxSolution> {
    cfg.validate()?;
    if (orbit.eps - cfg.eps).abs() > 1e-12 * cfg.eps || orbit.n() != cfg.n {
        return Err(Error::Config("orbit does not match the configured necksize".into()));
    }
    if grid.points_per_period < 8 {
        return Err(Error::Grid("need at least 8 points per period".into()));
    }
    let period = orbit.period;
    let half = cfg.m as f64 + 0.5;
    let s_min = -(cfg.end1.t0 + half * period);
    let s_max = cfg.end2.t0 + half * period;
    if !(s_max > s_min) {
        return Err(Error::Config("phases leave an empty neck".into()));
    }
    let n_t = ((s_max - s_min) / (period / grid.points_per_period as f64)).round() as usize + 1;
    let lmax = grid.lmax.max(cfg.perturbation_lmax());
    let mut proto = CylField::new(cfg.n, s_min, s_max, n_t)?;
    for l in 0..=lmax {
        proto.set_mode(l, vec![0.0; n_t])?;
    }
    let ss = proto.grid();
    let base: Vec<f64> = ss.iter().map(|&s| orbit.state(s + half * period).v).collect();
    let end_field = |end: &EndData, coord: &dyn Fn(f64) -> f64| -> Result<CylField> {
        let mut f = proto.clone();
        for l in 0..=lmax {
            let samples = ss
                .iter()
                .map(|&s| {
                    let t = coord(s);
                    end.perturbation
                        .iter()
                        .filter(|p| p.l == l)
                        .map(|p| p.amplitude * (-p.beta * t).exp())
                        .sum()
                })
                .collect();
            f.set_mode(l, samples)?;
        }
        Ok(f)
    };
    let t_of = |s: f64| s + cfg.end1.t0 + half * period;
    let tau_of = |s: f64| identify(t_of(s), cfg, period);
    let w1 = end_field(&cfg.end1, &t_of)?;
    let w2 = end_field(&cfg.end2, &tau_of)?;
    let chi: Vec<f64> = ss.iter().map(|&s| cutoff_chi(t_of(s), cfg, period)).collect();
    let mut w = proto.clone();
    for l in 0..=lmax {
        let a = w1.mode(l).expect("mode present");
        let b = w2.mode(l).expect("mode present");
        w.set_mode(l, (0..n_t).map(|i| chi[i] * a[i] + (1.0 - chi[i]) * b[i]).collect())?;
    }
    let approx = ApproxSolution { config: cfg.clone(), grid: *grid, orbit, base, w1, w2, chi, w };
    let quad = AngularQuadrature::new(cfg.n, lmax.max(1));
    for i in 0..n_t {
        if quad.reconstruct(&approx.w.coeffs_at(i)).iter().any(|x| !(approx.base[i] + x > 0.0)) {
            return Err(Error::domain(format!("approximate solution is not positive at s = {}", ss[i])));
        }
    }
    Ok(approx)
}

impl ApproxSolution {
    pub fn period(&self) -> f64 {
        self.orbit.period
    }

    pub fn lmax(&self) -> usize {
        self.w.lmax()
    }

    pub fn n_t(&self) -> usize {
        self.w.n_t
    }

    pub fn spacing(&self) -> f64 {
        self.w.spacing()
    }

    /// `m T`, the centre of the weight profile.
    pub fn weight_scale(&self) -> f64 {
        self.config.m as f64 * self.period()
    }

    /// Node range strictly inside the cutoff transition.
    pub fn band(&self) -> std::ops::Range<usize> {
        let lo = self.chi.iter().position(|&c| c < 1.0).unwrap_or(0);
        let hi = self.chi.iter().rposition(|&c| c > 0.0).map(|i| i + 1).unwrap_or(0);
        lo..hi.max(lo)
    }

    /// `v_m` as a plain mode expansion.
    pub fn field(&self) -> CylField {
        let mut f = self.w.clone();
        let m0: Vec<f64> = self.w.mode(0).expect("mode 0").iter().zip(&self.base).map(|(w, b)| w + b).collect();
        f.set_mode(0, m0).expect("same grid");
        f
    }

    /// Base orbit as a field on the neck grid.
    pub fn base_field(&self) -> CylField {
        let mut f = CylField::new(self.w.n, self.w.t_min, self.w.t_max, self.w.n_t).expect("valid grid");
        f.set_mode(0, self.base.clone()).expect("same grid");
        f
    }

    pub(crate) fn perturbation_ops(&self) -> Result<PerturbationOps> {
        let consts = self.orbit.consts;
        PerturbationOps::new(consts, self.base.clone(), self.spacing(), self.lmax())
    }

    /// Blended end residual `chi F(w1) + (1 - chi) F(w2)`.
    pub(crate) fn source(&self, pops: &PerturbationOps) -> Result<CylField> {
        let lmax = self.lmax();
        let r1 = pops.residual(&self.w1, lmax)?;
        let r2 = pops.residual(&self.w2, lmax)?;
        let mut out = r1.zeros_like();
        for l in 0..=lmax {
            let a = r1.mode(l).expect("mode present");
            let b = r2.mode(l).expect("mode present");
            out.set_mode(l, (0..self.n_t()).map(|i| self.chi[i] * a[i] + (1.0 - self.chi[i]) * b[i]).collect())?;
        }
        Ok(out)
    }

    /// Residual of `v_m + u` relative to the end sources.
    pub(crate) fn residual_with(&self, pops: &PerturbationOps, source: &CylField, u: Option<&CylField>) -> Result<CylField> {
        let total = match u {
            Some(u) => self.w.axpy(1.0, u)?,
            None => self.w.clone(),
        };
        pops.residual(&total, self.lmax())?.axpy(-1.0, source)
    }
}

/// The Q-curvature defect of an approximate solution.
#[derive(Debug, Clone)]
pub struct Defect {
    /// `Q(v_m) - n(n^2-4)/8` net of the end sources.
    pub psi: CylField,
    pub sup: f64,
    pub weighted: f64,
    /// Largest `|psi|` outside the cutoff transition.
    pub outside_band: f64,
}

pub fn defect(approx: &ApproxSolution, delta: f64) -> Result<Defect> {
    let pops = approx.perturbation_ops()?;
    let source = approx.source(&pops)?;
    let r = approx.residual_with(&pops, &source, None)?;
    let psi = pops.q_normalize(&approx.w, &r, approx.lmax())?;
    let band = approx.band();
    let outside = psi.sup_norm_on(0..band.start).max(psi.sup_norm_on(band.end..psi.n_t));
    Ok(Defect {
        sup: psi.sup_norm(),
        weighted: weighted_norm(&psi, delta, approx.weight_scale()),
        outside_band: outside,
        psi,
    })
}

fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `cosh^delta(scale) / cosh^delta(s)`.
pub fn weight(s: f64, delta: f64, scale: f64) -> f64 {
    (delta * (ln_cosh(scale) - ln_cosh(s))).exp()
}

/// `sup_s cosh^delta(scale)/cosh^delta(s) |u(s)|` over the grid nodes.
pub fn weighted_norm(field: &CylField, delta: f64, scale: f64) -> f64 {
    weighted_norm_windowed(field, delta, scale, 0.0)
}

/// Windowed variant: the weight at `s` multiplies the sup of `|u|` over
/// `[s - radius, s + radius]`, for centres whose window fits in the domain.
pub fn weighted_norm_windowed(field: &CylField, delta: f64, scale: f64, radius: f64) -> f64 {
    let h = field.spacing();
    let k = (radius / h).round() as usize;
    let n = field.n_t;
    if n <= 2 * k {
        return 0.0;
    }
    let local: Vec<f64> = (0..n)
        .map(|i| field.modes.iter().map(|m| m.samples[i].abs()).fold(0.0, f64::max))
        .collect();
    (k..n - k)
        .map(|i| weight(field.t_at(i), delta, scale) * local[i - k..=i + k].iter().copied().fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecayRow {
    pub m: usize,
    pub sup_psi: f64,
    pub weighted_psi: f64,
}

/// Defect norms across `m` and the fitted decay rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecayStudy {
    pub rows: Vec<DecayRow>,
    pub period: f64,
    /// `None` when every defect is below the floor.
    pub beta_hat: Option<f64>,
    /// Largest deviation of `log sup psi` from the fitted line.
    pub fit_residual: f64,
    pub exact: bool,
}

/// Fit `log sup psi_m = -beta m T + c` over `ms` (at least three values).
pub fn decay_study(template: &GluingConfig, ms: &[usize], grid: &GridSpec, delta: f64) -> Result<DecayStudy> {
    if ms.len() < 3 {
        return Err(Error::domain("a decay study needs at least three values of m"));
    }
    template.validate()?;
    let orbit = solve_orbit(Dimension::new(template.n)?, template.eps, DEFAULT_TOL)?;
    let rows = ms
        .par_iter()
        .map(|&m| {
            let cfg = GluingConfig { m, ..template.clone() };
            let approx = build_with_orbit(&cfg, grid, orbit.clone())?;
            let d = defect(&approx, delta)?;
            Ok(DecayRow { m, sup_psi: d.sup, weighted_psi: d.weighted })
        })
        .collect::<Result<Vec<_>>>()?;
    let period = orbit.period;
    if rows.iter().all(|r| r.sup_psi <= DEFECT_FLOOR) {
        return Ok(DecayStudy { rows, period, beta_hat: None, fit_residual: 0.0, exact: true });
    }
    if rows.iter().any(|r| r.sup_psi <= DEFECT_FLOOR) {
        return Err(Error::numerical("some defects vanish while others do not; no log-linear fit"));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.m as f64 * period).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.sup_psi.ln()).collect();
    let (slope, icpt) = linear_fit(&xs, &ys);
    if !slope.is_finite() {
        return Err(Error::numerical("degenerate decay fit"));
    }
    let fit_residual = xs.iter().zip(&ys).map(|(x, y)| (y - slope * x - icpt).abs()).fold(0.0, f64::max);
    Ok(DecayStudy { rows, period, beta_hat: Some(-slope), fit_residual, exact: false })
}

impl DecayStudy {
    /// Columns `m,supPsi,weightedPsi,fitBeta`; `fitBeta` is empty for exact runs.
    pub fn to_csv(&self) -> String {
        let beta = self.beta_hat.map(|b| b.to_string()).unwrap_or_default();
        let mut out = String::from("m,supPsi,weightedPsi,fitBeta\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.m, r.sup_psi, r.weighted_psi, beta));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(m: usize) -> GluingConfig {
        GluingConfig { n: 5, eps: 0.5, m, r0: 1.0, end1: EndData::default(), end2: EndData::default() }
    }

    #[test]
    fn identification_is_an_involution() {
        let mut cfg = config(2);
        let period = 5.0;
        assert_eq!(identify(12.5, &cfg, period), 12.5);
        cfg.end1.t0 = 0.3;
        cfg.end2.t0 = 1.1;
        for t in [0.0, 3.7, 20.0] {
            assert!((identify(identify(t, &cfg, period), &cfg, period) - t).abs() < 1e-12);
        }
        let inner = cfg.end1.t0 + 3.0 * period;
        assert!((identify(inner, &cfg, period) - (cfg.end2.t0 + 2.0 * period)).abs() < 1e-12);
    }

    #[test]
    fn cutoff_plateaus_and_midpoint() {
        let cfg = config(2);
        let p = 4.0;
        assert_eq!(cutoff_chi(2.0 * p, &cfg, p), 1.0);
        assert_eq!(cutoff_chi(2.25 * p, &cfg, p), 1.0);
        assert_eq!(cutoff_chi(2.75 * p, &cfg, p), 0.0);
        assert!((cutoff_chi(2.5 * p, &cfg, p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stable_powers_match_direct_evaluation() {
        let p: f64 = 9.0;
        for x in [1e-2f64, -3e-3, 0.2] {
            let direct = (1.0 + x).powf(p) - 1.0;
            assert!((rel_power_m1(x, p) - direct).abs() < 1e-13 * direct.abs());
            assert!((rel_power_m2(x, p) - (direct - p * x)).abs() < 1e-12 * (direct - p * x).abs());
        }
        let tiny = 1e-20;
        assert!((rel_power_m2(tiny, p) - 36.0 * tiny * tiny).abs() < 1e-12 * 36.0 * tiny * tiny);
    }

    #[test]
    fn exact_ends_have_no_defect() {
        let approx = build_approximate(&config(2), &GridSpec::default()).unwrap();
        let d = defect(&approx, 1.5).unwrap();
        assert_eq!(d.sup, 0.0);
        assert_eq!(approx.n_t(), 5 * 64 + 1);
    }

    #[test]
    fn perturbed_defect_lives_in_the_band() {
        let mut cfg = config(2);
        cfg.end1.perturbation.push(PerturbationTerm { l: 0, amplitude: 1e-3, beta: 2.0 });
        let approx = build_approximate(&cfg, &GridSpec::default()).unwrap();
        let d = defect(&approx, 1.5).unwrap();
        assert!(d.sup > 0.0);
        assert!(d.outside_band < 1e-10 * d.sup.max(1e-300) || d.outside_band < 1e-10);
        // where chi = 1 the field is the end-1 data exactly
        let f = approx.field();
        let i = 3;
        assert_eq!(f.mode(0).unwrap()[i], approx.base[i] + approx.w1.mode(0).unwrap()[i]);
    }

    #[test]
    fn mismatched_necksize_is_a_config_error() {
        let mut cfg = config(1);
        cfg.end2.eps = Some(0.4);
        assert!(matches!(build_approximate(&cfg, &GridSpec::default()), Err(Error::Config(_))));
    }

    #[test]
    fn weighted_norm_examples() {
        let ones = CylField::radial(5, -3.0, 3.0, 61, |_| 1.0).unwrap();
        assert!((weighted_norm(&ones, 0.0, 2.0) - 1.0).abs() < 1e-15);
        let delta = 1.3;
        let scale: f64 = 2.0;
        let f = CylField::radial(5, -3.0, 3.0, 61, |s| (s.cosh() / scale.cosh()).powf(delta)).unwrap();
        assert!((weighted_norm(&f, delta, scale) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let good = r#"{"n":5,"eps":0.5,"m":2,"end1":{"T0":0,"perturbation":[{"l":0,"A":0.001,"beta":2}]},"end2":{"T0":0}}"#;
        let cfg = GluingConfig::from_json(good).unwrap();
        assert_eq!(cfg.r0, 1.0);
        let bad = r#"{"n":5,"eps":0.5,"m":2,"extra":1,"end1":{"T0":0},"end2":{"T0":0}}"#;
        assert!(GluingConfig::from_json(bad).is_err());
    }
}

#[cfg(test)]
mod decay_tests {
    use super::*;

    #[test]
    fn defect_decays_at_the_perturbation_rate() {
        for beta in [1.5, 2.0] {
            let mut cfg = GluingConfig { n: 5, eps: 0.5, m: 1, r0: 1.0, end1: EndData::default(), end2: EndData::default() };
            cfg.end1.perturbation.push(PerturbationTerm { l: 0, amplitude: 1e-3, beta });
            let study = decay_study(&cfg, &[1, 2, 3, 4, 5], &GridSpec::default(), 1.5).unwrap();
            let b = study.beta_hat.unwrap();
            assert!((b - beta).abs() < 0.1, "beta {beta}: fitted {b}");
        }
    }
}
