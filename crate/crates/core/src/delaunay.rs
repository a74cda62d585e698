//! Delaunay solutions: the ODE `v'''' = c2 v'' - c0 v + cN v^p`, its first
//! integral, periodic orbits found by shooting on `v''(0)`, and the family of
//! translated/rescaled solutions.

use serde::{Deserialize, Serialize};

use crate::error::{EscapeDirection, Error, Result};
use crate::gauges::{derive_constants, q_residual, CylField, Dimension, GaugeConstants};
use crate::ode::{dopri_fixed, dopri_step, Dopri5, Flow, StepView};

/// Default integrator tolerance for orbit construction.
pub const DEFAULT_TOL: f64 = 1e-11;

/// Nodes stored per half period.
pub(crate) const HALF_NODES: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OdeState {
    pub v: f64,
    pub v_dot: f64,
    pub v_ddot: f64,
    pub v_dddot: f64,
}

impl OdeState {
    pub fn new(v: f64, v_dot: f64, v_ddot: f64, v_dddot: f64) -> Self {
        Self { v, v_dot, v_ddot, v_dddot }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.v, self.v_dot, self.v_ddot, self.v_dddot]
    }

    pub fn from_array(y: [f64; 4]) -> Self {
        Self::new(y[0], y[1], y[2], y[3])
    }
}

pub(crate) fn power(v: f64, p: f64) -> f64 {
    if p.fract() == 0.0 {
        v.powi(p as i32)
    } else {
        v.powf(p)
    }
}

/// Fourth derivative prescribed by the ODE.
pub fn fourth_derivative(y: &[f64; 4], c: &GaugeConstants) -> f64 {
    c.c2 * y[2] - c.c0 * y[0] + c.c_n * power(y[0], c.p)
}

fn rhs(c: &GaugeConstants) -> impl Fn(f64, &[f64; 4]) -> [f64; 4] + '_ {
    move |_, y| [y[1], y[2], y[3], fourth_derivative(y, c)]
}

/// First-order form of the Delaunay ODE.
pub fn ode_rhs(state: &OdeState, consts: &GaugeConstants) -> Result<OdeState> {
    if !(state.v > 0.0) {
        return Err(Error::domain(format!("ODE evaluated at v = {}", state.v)));
    }
    let y = state.to_array();
    Ok(OdeState::new(y[1], y[2], y[3], fourth_derivative(&y, consts)))
}

/// `H = -v' v''' + v''^2/2 + c2/2 v'^2 - c0/2 v^2 + (n-4)^2 (n^2-4)/32 v^{2n/(n-4)}`.
pub fn hamiltonian(state: &OdeState, consts: &GaugeConstants) -> f64 {
    let n = consts.nf();
    let coef = (n - 4.0).powi(2) * (n * n - 4.0) / 32.0;
    let expo = 2.0 * n / (n - 4.0);
    let pot = if state.v == 0.0 { 0.0 } else { coef * power(state.v.abs(), expo) };
    -state.v_dot * state.v_dddot + 0.5 * state.v_ddot * state.v_ddot + 0.5 * consts.c2 * state.v_dot.powi(2)
        - 0.5 * consts.c0 * state.v * state.v
        + pot
}

/// Values of `v` beyond which a trajectory counts as escaped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EscapeBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for EscapeBounds {
    fn default() -> Self {
        Self { lower: 1e-8, upper: 1e8 }
    }
}

/// Integrated trajectory with continuous output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    steps: Vec<StepView<4>>,
    pub t_start: f64,
    pub t_end: f64,
    /// Accepted steps times the local tolerance; a crude global bound.
    pub error_estimate: f64,
}

impl Trajectory {
    pub fn eval(&self, t: f64) -> Result<OdeState> {
        let (lo, hi) = (self.t_start.min(self.t_end), self.t_start.max(self.t_end));
        if t < lo - 1e-12 || t > hi + 1e-12 {
            return Err(Error::domain(format!("t = {t} outside [{lo}, {hi}]")));
        }
        let idx = self
            .steps
            .iter()
            .position(|s| (t - s.t0) * (t - s.t1) <= 0.0)
            .unwrap_or(self.steps.len() - 1);
        Ok(OdeState::from_array(self.steps[idx].dense(t)))
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Integrate the ODE from `state0` across `t_span`.
///
/// Leaving `(1e-8, 1e8)` is reported as [`Error::Escape`].
pub fn integrate(state0: OdeState, t_span: (f64, f64), tol: f64, consts: &GaugeConstants) -> Result<Trajectory> {
    integrate_within(state0, t_span, tol, consts, EscapeBounds::default())
}

pub fn integrate_within(
    state0: OdeState,
    t_span: (f64, f64),
    tol: f64,
    consts: &GaugeConstants,
    bounds: EscapeBounds,
) -> Result<Trajectory> {
    if !(tol > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    if !(state0.v > bounds.lower && state0.v < bounds.upper) {
        return Err(Error::domain(format!("initial value {} outside escape bounds", state0.v)));
    }
    let mut steps = Vec::new();
    let mut escape = None;
    let out = Dopri5::with_tol(tol).with_max_step(0.25).solve(rhs(consts), t_span.0, state0.to_array(), t_span.1, |s| {
        steps.push(s.clone());
        escape = classify_step(s, bounds);
        if escape.is_some() {
            Flow::Stop
        } else {
            Flow::Continue
        }
    })?;
    if let Some((time, direction)) = escape {
        return Err(Error::Escape { time, direction });
    }
    Ok(Trajectory { steps, t_start: t_span.0, t_end: out.t, error_estimate: tol * out.steps as f64 })
}

fn classify_step(s: &StepView<4>, bounds: EscapeBounds) -> Option<(f64, EscapeDirection)> {
    if s.y1[0] <= bounds.lower || !s.y1[0].is_finite() {
        let t = s.locate(|y| y[0] - bounds.lower).unwrap_or(s.t1);
        Some((t, EscapeDirection::Down))
    } else if s.y1[0] >= bounds.upper {
        let t = s.locate(|y| y[0] - bounds.upper).unwrap_or(s.t1);
        Some((t, EscapeDirection::Up))
    } else {
        None
    }
}

/// One periodic, even solution `v_eps` with `v(0) = eps` its minimum.
#[derive(Debug, Clone)]
pub struct DelaunayOrbit {
    pub consts: GaugeConstants,
    pub eps: f64,
    pub period: f64,
    pub v_ddot0: f64,
    pub hamiltonian_value: f64,
    pub tol: f64,
    node_dt: f64,
    // states at t = k * node_dt, k = 0..=HALF_NODES, covering [0, T/2]
    nodes: Vec<[f64; 4]>,
}

/// Serialized samples of an orbit over one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OrbitRecord {
    pub n: usize,
    pub eps: f64,
    pub period: f64,
    pub v_ddot0: f64,
    pub hamiltonian: f64,
    pub n_samples: usize,
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub v_dot: Vec<f64>,
    pub v_ddot: Vec<f64>,
    pub v_dddot: Vec<f64>,
}

/// Interior sup of `P_cyl v - cN v^p` for the orbit sampled on `[-kT, kT]`,
/// with `k` the least number of periods giving 96 nodes.
pub fn orbit_residual(orbit: &DelaunayOrbit, points_per_period: usize) -> Result<f64> {
    let k = 48usize.div_ceil(points_per_period.max(1)).max(1);
    let span = k as f64 * orbit.period;
    let field = CylField::radial(orbit.n(), -span, span, 2 * k * points_per_period + 1, |t| orbit.state(t).v)?;
    Ok(q_residual(&field)?.interior_sup())
}

/// Angular frequency of small oscillations about the constant solution.
pub fn linear_frequency(consts: &GaugeConstants) -> f64 {
    // mu = i omega solves mu^4 - c2 mu^2 + c0 (1 - p) = 0
    let disc = consts.c2 * consts.c2 - 4.0 * consts.c0 * (1.0 - consts.p);
    ((-consts.c2 + disc.sqrt()) / 2.0).sqrt()
}

/// Shooting classification of `v''(0) = b`.
fn shoot(consts: &GaugeConstants, eps: f64, b: f64, tol: f64, t_max: f64) -> Result<Option<EscapeDirection>> {
    let bounds = EscapeBounds { lower: 0.5 * eps, upper: 2.0 };
    match integrate_within(OdeState::new(eps, 0.0, b, 0.0), (0.0, t_max), tol, consts, bounds) {
        Ok(_) => Ok(None),
        Err(Error::Escape { direction, .. }) => Ok(Some(direction)),
        Err(e) => Err(e),
    }
}

/// Time of the first interior maximum of the even solution with `v''(0) = b`.
fn first_maximum(consts: &GaugeConstants, eps: f64, b: f64, tol: f64) -> Result<f64> {
    let f = rhs(consts);
    let mut found: Option<(f64, f64, [f64; 4])> = None;
    Dopri5::with_tol(tol).with_max_step(0.25).solve(&f, 0.0, [eps, 0.0, b, 0.0], 1e3, |s| {
        if s.y0[1] >= 0.0 && s.y1[1] < 0.0 && s.t1 > 0.0 {
            let guess = s.locate(|y| y[1]).unwrap_or(s.t1);
            found = Some((guess, s.t0, s.y0));
            Flow::Stop
        } else if s.y1[0] < 0.5 * eps || s.y1[0] > 2.0 {
            Flow::Stop
        } else {
            Flow::Continue
        }
    })?;
    let (mut t, t0, y0) = found.ok_or_else(|| Error::numerical("no interior maximum found"))?;
    for _ in 0..20 {
        let y = dopri_fixed(&f, t0, &y0, t - t0, 8);
        let dt = -y[1] / y[2];
        t += dt;
        if dt.abs() < 1e-15 * t {
            break;
        }
    }
    Ok(t)
}

/// Newton refinement of `(v''(0), T/2)` on the symmetry conditions
/// `v'(T/2) = v'''(T/2) = 0`, integrating the state and its `b`-variation with
/// the same fixed steps used for the stored nodes.
fn polish(consts: &GaugeConstants, eps: f64, mut b: f64, mut half: f64) -> (f64, f64) {
    let kappa = consts.jacobi_coeff();
    let f = |_: f64, y: &[f64; 8]| {
        let pot = kappa * power(y[0], consts.p - 1.0);
        [
            y[1],
            y[2],
            y[3],
            fourth_derivative(&[y[0], y[1], y[2], y[3]], consts),
            y[5],
            y[6],
            y[7],
            consts.c2 * y[6] - consts.c0 * y[4] + pot * y[4],
        ]
    };
    for _ in 0..8 {
        let y = dopri_fixed(f, 0.0, &[eps, 0.0, b, 0.0, 0.0, 0.0, 1.0, 0.0], half, HALF_NODES);
        let v4 = fourth_derivative(&[y[0], y[1], y[2], y[3]], consts);
        // rows: v' and v''' at T/2; columns: d/db and d/d(T/2)
        let (a11, a12, a21, a22) = (y[5], y[2], y[7], v4);
        let det = a11 * a22 - a12 * a21;
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let db = -(a22 * y[1] - a12 * y[3]) / det;
        let dh = -(a11 * y[3] - a21 * y[1]) / det;
        b += db;
        half += dh;
        if db.abs() <= 1e-16 * b.abs() && dh.abs() <= 1e-15 * half {
            break;
        }
    }
    (b, half)
}

/// Periodic orbit with necksize `eps` in `(0, eps_bar]`.
pub fn solve_orbit(n: Dimension, eps: f64, tol: f64) -> Result<DelaunayOrbit> {
    let consts = derive_constants(n);
    if !(eps > 0.0) || eps > consts.eps_bar * (1.0 + 1e-12) {
        return Err(Error::domain(format!("eps = {eps} outside (0, {}]", consts.eps_bar)));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    if (eps - consts.eps_bar).abs() <= 1e-12 * consts.eps_bar {
        return Ok(constant_orbit(consts));
    }
    let t_max = 400.0;
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    loop {
        match shoot(&consts, eps, hi, tol, t_max)? {
            Some(EscapeDirection::Up) => break,
            Some(EscapeDirection::Down) => lo = hi,
            None => break,
        }
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::numerical(format!("no upward-escaping bracket for eps = {eps}")));
        }
    }
    if shoot(&consts, eps, lo, tol, t_max)? != Some(EscapeDirection::Down) {
        return Err(Error::numerical(format!("v''(0) = {lo} does not escape downward for eps = {eps}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match shoot(&consts, eps, mid, tol, t_max)? {
            Some(EscapeDirection::Down) => lo = mid,
            Some(EscapeDirection::Up) => hi = mid,
            None => {
                lo = mid;
                hi = mid;
                break;
            }
        }
    }
    let b0 = 0.5 * (lo + hi);
    let (b, half) = polish(&consts, eps, b0, first_maximum(&consts, eps, b0, tol)?);
    let node_dt = half / HALF_NODES as f64;
    let f = rhs(&consts);
    let mut nodes = Vec::with_capacity(HALF_NODES + 1);
    let mut y = [eps, 0.0, b, 0.0];
    nodes.push(y);
    for k in 0..HALF_NODES {
        y = dopri_step(&f, k as f64 * node_dt, &y, node_dt);
        nodes.push(y);
    }
    let h = hamiltonian(&OdeState::from_array(nodes[0]), &consts);
    Ok(DelaunayOrbit { consts, eps, period: 2.0 * half, v_ddot0: b, hamiltonian_value: h, tol, node_dt, nodes })
}

fn constant_orbit(consts: GaugeConstants) -> DelaunayOrbit {
    let eps = consts.eps_bar;
    let period = std::f64::consts::TAU / linear_frequency(&consts);
    let y = [eps, 0.0, 0.0, 0.0];
    DelaunayOrbit {
        consts,
        eps,
        period,
        v_ddot0: 0.0,
        hamiltonian_value: hamiltonian(&OdeState::from_array(y), &consts),
        tol: DEFAULT_TOL,
        node_dt: period / 2.0 / HALF_NODES as f64,
        nodes: vec![y; HALF_NODES + 1],
    }
}

impl DelaunayOrbit {
    pub fn n(&self) -> usize {
        self.consts.n
    }

    pub fn is_constant(&self) -> bool {
        self.v_ddot0 == 0.0
    }

    /// State at time `t`, using evenness and periodicity.
    pub fn state(&self, t: f64) -> OdeState {
        let period = self.period;
        let mut s = t.rem_euclid(period);
        let mut sign = 1.0;
        if s > 0.5 * period {
            s = period - s;
            sign = -1.0;
        }
        let k = ((s / self.node_dt).round() as usize).min(HALF_NODES);
        let tk = k as f64 * self.node_dt;
        let y = if (s - tk).abs() == 0.0 || self.is_constant() {
            self.nodes[k]
        } else {
            dopri_step(rhs(&self.consts), tk, &self.nodes[k], s - tk)
        };
        OdeState::new(y[0], sign * y[1], y[2], sign * y[3])
    }

    /// `d^order v / dt^order` at `t` for `order <= 4`.
    pub fn eval(&self, t: f64, order: usize) -> Result<f64> {
        let s = self.state(t);
        match order {
            0 => Ok(s.v),
            1 => Ok(s.v_dot),
            2 => Ok(s.v_ddot),
            3 => Ok(s.v_dddot),
            4 => Ok(fourth_derivative(&s.to_array(), &self.consts)),
            _ => Err(Error::domain(format!("derivative order {order} not available"))),
        }
    }

    /// Value and derivatives of orders 0..=4 at `t`.
    pub fn jet(&self, t: f64) -> [f64; 5] {
        let y = self.state(t).to_array();
        [y[0], y[1], y[2], y[3], fourth_derivative(&y, &self.consts)]
    }

    /// Derivatives of orders 0..=5 at `t`.
    pub fn derivs(&self, t: f64) -> [f64; 6] {
        let y = self.state(t).to_array();
        let c = &self.consts;
        let v5 = c.c2 * y[3] - c.c0 * y[1] + c.jacobi_coeff() * power(y[0], c.p - 1.0) * y[1];
        [y[0], y[1], y[2], y[3], fourth_derivative(&y, c), v5]
    }

    pub(crate) fn node_dt(&self) -> f64 {
        self.node_dt
    }

    pub(crate) fn node(&self, k: usize) -> [f64; 4] {
        self.nodes[k]
    }

    /// Integrate the second half period forward from the stored state at
    /// `T/2`, returning the states at each step.
    fn second_half(&self) -> Vec<[f64; 4]> {
        let f = rhs(&self.consts);
        let mut y = self.nodes[HALF_NODES];
        let mut out = Vec::with_capacity(HALF_NODES + 1);
        out.push(y);
        for k in 0..HALF_NODES {
            y = dopri_step(&f, 0.5 * self.period + k as f64 * self.node_dt, &y, self.node_dt);
            out.push(y);
        }
        out
    }

    /// `|state(T) - state(0)|_inf`, where `state(T)` comes from integrating
    /// the ODE over `[T/2, T]` rather than from the even extension.
    pub fn periodicity_defect(&self) -> f64 {
        let end = *self.second_half().last().expect("nonempty");
        end.iter().zip(&self.nodes[0]).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
    }

    /// Largest relative deviation of `H` from its initial value over one
    /// integrated period.
    pub fn hamiltonian_drift(&self) -> f64 {
        let h0 = self.hamiltonian_value;
        let scale = h0.abs().max(1e-300);
        self.nodes
            .iter()
            .chain(self.second_half().iter())
            .map(|y| (hamiltonian(&OdeState::from_array(*y), &self.consts) - h0).abs() / scale)
            .fold(0.0, f64::max)
    }

    pub fn record(&self, n_samples: usize) -> OrbitRecord {
        let n_samples = n_samples.max(2);
        let dt = self.period / (n_samples - 1) as f64;
        let t: Vec<f64> = (0..n_samples).map(|i| i as f64 * dt).collect();
        let states: Vec<OdeState> = t.iter().map(|&s| self.state(s)).collect();
        OrbitRecord {
            n: self.n(),
            eps: self.eps,
            period: self.period,
            v_ddot0: self.v_ddot0,
            hamiltonian: self.hamiltonian_value,
            n_samples,
            v: states.iter().map(|s| s.v).collect(),
            v_dot: states.iter().map(|s| s.v_dot).collect(),
            v_ddot: states.iter().map(|s| s.v_ddot).collect(),
            v_dddot: states.iter().map(|s| s.v_dddot).collect(),
            t,
        }
    }

    pub fn to_json(&self, n_samples: usize) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.record(n_samples))?)
    }
}

/// Parameters of the deformed family `u_{eps,R,a}` with `R = e^{-T}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FamilyParams {
    pub eps: f64,
    #[serde(rename = "T")]
    pub t_shift: f64,
    pub a: Vec<f64>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `u(x) = |x|^{(4-n)/2} |x/|x| - |x| a|^{(4-n)/2} v(-log|x| + log|x/|x| - |x| a| + T)`.
pub fn eval_family(params: &FamilyParams, orbit: &DelaunayOrbit, x: &[f64]) -> Result<f64> {
    let n = orbit.n();
    if x.len() != n || params.a.len() != n {
        return Err(Error::domain(format!("points and translations must lie in R^{n}")));
    }
    let r = norm(x);
    if r == 0.0 {
        return Err(Error::domain("family evaluated at the origin"));
    }
    let y: Vec<f64> = x.iter().zip(&params.a).map(|(xi, ai)| xi / r - r * ai).collect();
    let ry = norm(&y);
    if ry == 0.0 {
        return Err(Error::domain("family evaluated at the translated pole"));
    }
    let w = orbit.consts.weight();
    Ok(r.powf(w) * ry.powf(w) * orbit.eval(-r.ln() + ry.ln() + params.t_shift, 0)?)
}

/// Cylinder-gauge family at `(t, theta)` where `cos_angle = <theta, a/|a|>`:
/// `|theta - e^{-t} a|^{(4-n)/2} v(t + T + log|theta - e^{-t} a|)`.
pub fn eval_family_cyl(orbit: &DelaunayOrbit, t_shift: f64, a_norm: f64, t: f64, cos_angle: f64) -> Result<f64> {
    let s = (-t).exp() * a_norm;
    let d2 = 1.0 - 2.0 * s * cos_angle + s * s;
    if !(d2 > 0.0) {
        return Err(Error::domain("family evaluated at the translated pole"));
    }
    let d = d2.sqrt();
    Ok(d.powf(orbit.consts.weight()) * orbit.eval(t + t_shift + d.ln(), 0)?)
}

/// Deviation of the family from its first-order expansion in `a`, maximized
/// over `directions` sampled angles, at each `t`.
pub fn expansion_profile(params: &FamilyParams, orbit: &DelaunayOrbit, ts: &[f64], directions: usize) -> Result<Vec<f64>> {
    let a = norm(&params.a);
    let half_weight = (orbit.n() as f64 - 4.0) / 2.0;
    let dirs = directions.max(2);
    ts.iter()
        .map(|&t| {
            let base = orbit.state(t + params.t_shift);
            let mut worst: f64 = 0.0;
            for k in 0..dirs {
                let c = -1.0 + 2.0 * k as f64 / (dirs - 1) as f64;
                let exact = eval_family_cyl(orbit, params.t_shift, a, t, c)?;
                let lin = base.v + (-t).exp() * a * c * (half_weight * base.v - base.v_dot);
                worst = worst.max((exact - lin).abs());
            }
            Ok(worst)
        })
        .collect()
}

/// Max over `t` in `t_range` (uniform, `nt` points) and sampled directions of
/// the first-order expansion error.
pub fn expansion_error(params: &FamilyParams, orbit: &DelaunayOrbit, t_range: (f64, f64), nt: usize) -> Result<f64> {
    let nt = nt.max(2);
    let ts: Vec<f64> = (0..nt)
        .map(|i| t_range.0 + (t_range.1 - t_range.0) * i as f64 / (nt - 1) as f64)
        .collect();
    Ok(expansion_profile(params, orbit, &ts, 33)?.into_iter().fold(0.0, f64::max))
}

/// Expansion errors below this are rounding noise in `exact - linear`.
pub const EXPANSION_FLOOR: f64 = 1e-13;

/// Least-squares slope of `log(err)` against `t` over the whole periods in
/// `t_range`, one point per period at the window maximum. Windows whose
/// maximum is below [`EXPANSION_FLOOR`] are dropped.
pub fn expansion_decay_slope(params: &FamilyParams, orbit: &DelaunayOrbit, t_range: (f64, f64)) -> Result<f64> {
    let per_window = 64;
    let windows = ((t_range.1 - t_range.0) / orbit.period + 1e-9).floor().max(1.0) as usize;
    let mut xs = Vec::with_capacity(windows);
    let mut ys = Vec::with_capacity(windows);
    for w in 0..windows {
        let start = t_range.0 + w as f64 * orbit.period;
        let ts: Vec<f64> = (0..per_window).map(|i| start + orbit.period * i as f64 / per_window as f64).collect();
        let prof = expansion_profile(params, orbit, &ts, 33)?;
        let (i, e) = prof
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
        if e > EXPANSION_FLOOR {
            xs.push(ts[i]);
            ys.push(e.ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::numerical("too few resolved periods to fit a decay rate"));
    }
    Ok(linear_fit(&xs, &ys).0)
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five() -> GaugeConstants {
        GaugeConstants::for_dimension(5).unwrap()
    }

    #[test]
    fn rhs_examples() {
        let c = five();
        let eq = ode_rhs(&OdeState::new(c.eps_bar, 0.0, 0.0, 0.0), &c).unwrap();
        assert!(eq.to_array().iter().all(|x| x.abs() < 1e-14));
        let one = ode_rhs(&OdeState::new(1.0, 0.0, 0.0, 0.0), &c).unwrap();
        assert!((one.v_dddot - 5.0).abs() < 1e-14);
        assert!(matches!(ode_rhs(&OdeState::new(0.0, 0.0, 0.0, 0.0), &c), Err(Error::Domain(_))));
    }

    #[test]
    fn hamiltonian_examples() {
        let c = five();
        assert_eq!(hamiltonian(&OdeState::new(0.0, 0.0, 0.0, 0.0), &c), 0.0);
        let e = c.eps_bar;
        let h = hamiltonian(&OdeState::new(e, 0.0, 0.0, 0.0), &c);
        let closed = -25.0 / 32.0 * e * e + 21.0 / 32.0 * e.powi(10);
        assert!((h - closed).abs() < 1e-15);
        assert!((h + 0.4366).abs() < 1e-4);
    }

    #[test]
    fn spherical_profile_is_reproduced() {
        // the profile is homoclinic, so roundoff grows like e^{n t/2}
        for (n, t_end) in [(5usize, 5.0), (6, 4.0), (8, 3.0)] {
            let c = GaugeConstants::for_dimension(n).unwrap();
            let w = c.weight();
            let exact = |t: f64| t.cosh().powf(w);
            let traj = integrate(OdeState::new(1.0, 0.0, w, 0.0), (0.0, t_end), 1e-12, &c).unwrap();
            for k in 0..=50 {
                let t = t_end * k as f64 / 50.0;
                let e = (traj.eval(t).unwrap().v - exact(t)).abs();
                assert!(e < 1e-8, "n={n} t={t} err={e:e}");
            }
        }
    }

    #[test]
    fn equilibrium_does_not_drift() {
        let c = five();
        let traj = integrate(OdeState::new(c.eps_bar, 0.0, 0.0, 0.0), (0.0, 100.0), 1e-11, &c).unwrap();
        assert!((traj.eval(100.0).unwrap().v - c.eps_bar).abs() < 1e-10);
    }

    #[test]
    fn escape_is_reported_with_direction() {
        let c = five();
        let err = integrate(OdeState::new(1.5, 0.0, 0.0, 0.0), (0.0, 50.0), 1e-10, &c).unwrap_err();
        assert!(matches!(err, Error::Escape { direction: EscapeDirection::Up, .. }), "{err:?}");
        let err = integrate(OdeState::new(0.5, 0.0, 0.0, 0.0), (0.0, 50.0), 1e-10, &c).unwrap_err();
        assert!(matches!(err, Error::Escape { direction: EscapeDirection::Down, .. }), "{err:?}");
    }

    #[test]
    fn constant_orbit_period() {
        let orbit = solve_orbit(Dimension::new(5).unwrap(), five().eps_bar, DEFAULT_TOL).unwrap();
        assert!((linear_frequency(&orbit.consts) - 1.24593).abs() < 1e-5);
        assert!((orbit.period - 5.0429).abs() < 1e-4);
        assert!(orbit.is_constant());
    }

    #[test]
    fn orbit_at_half() {
        let c = five();
        let orbit = solve_orbit(Dimension::new(5).unwrap(), 0.5, DEFAULT_TOL).unwrap();
        assert!((orbit.eval(0.0, 0).unwrap() - 0.5).abs() < 1e-15);
        assert!((orbit.eval(orbit.period, 0).unwrap() - 0.5).abs() < 1e-12);
        assert!(orbit.eval(orbit.period / 2.0, 1).unwrap().abs() < 1e-9);
        let h_bar = hamiltonian(&OdeState::new(c.eps_bar, 0.0, 0.0, 0.0), &c);
        assert!(orbit.hamiltonian_value > h_bar && orbit.hamiltonian_value < 0.0);
        assert!(orbit.periodicity_defect() < 1e-7);
        assert!(orbit.hamiltonian_drift() < 1e-8);
        assert!(orbit.eval(0.3, 5).is_err());
    }

    #[test]
    fn eps_outside_family_is_rejected() {
        let n = Dimension::new(5).unwrap();
        assert!(matches!(solve_orbit(n, 0.9, DEFAULT_TOL), Err(Error::Domain(_))));
        assert!(matches!(solve_orbit(n, 0.0, DEFAULT_TOL), Err(Error::Domain(_))));
    }

    #[test]
    fn family_reduces_to_the_orbit_without_translation() {
        let orbit = solve_orbit(Dimension::new(5).unwrap(), 0.6, DEFAULT_TOL).unwrap();
        let params = FamilyParams { eps: 0.6, t_shift: 0.0, a: vec![0.0; 5] };
        for r in [0.05, 0.4, 2.0] {
            let x = [r, 0.0, 0.0, 0.0, 0.0];
            let u = eval_family(&params, &orbit, &x).unwrap();
            let expected = r.powf(-0.5) * orbit.eval(-r.ln(), 0).unwrap();
            assert!((u - expected).abs() < 1e-13 * expected);
        }
        assert_eq!(expansion_error(&params, &orbit, (1.0, 3.0), 10).unwrap(), 0.0);
    }

    #[test]
    fn family_scaling_law() {
        let orbit = solve_orbit(Dimension::new(5).unwrap(), 0.6, DEFAULT_TOL).unwrap();
        let rr: f64 = 1.7;
        let plain = FamilyParams { eps: 0.6, t_shift: 0.0, a: vec![0.0; 5] };
        let scaled = FamilyParams { eps: 0.6, t_shift: -rr.ln(), a: vec![0.0; 5] };
        for r in [0.1, 0.9] {
            let x = [0.0, r, 0.0, 0.0, 0.0];
            let rx = [0.0, rr * r, 0.0, 0.0, 0.0];
            let lhs = rr.powf(0.5) * eval_family(&plain, &orbit, &rx).unwrap();
            let rhs = eval_family(&scaled, &orbit, &x).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * rhs);
        }
    }

    #[test]
    fn orbit_record_has_fixed_names() {
        let orbit = solve_orbit(Dimension::new(5).unwrap(), five().eps_bar, DEFAULT_TOL).unwrap();
        let json: serde_json::Value = serde_json::from_str(&orbit.to_json(9).unwrap()).unwrap();
        for key in ["n", "eps", "period", "vDdot0", "hamiltonian", "nSamples", "t", "v", "vDot", "vDdot", "vDddot"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["t"].as_array().unwrap().len(), 9);
    }

    #[test]
    fn orbit_solves_the_cylindrical_equation() {
        let o = solve_orbit(Dimension::new(5).unwrap(), 0.5, DEFAULT_TOL).unwrap();
        assert!(orbit_residual(&o, 96).unwrap() < 1e-8);
    }

    #[test]
    fn translation_expansion_is_second_order() {
        let o = solve_orbit(Dimension::new(5).unwrap(), 0.5, DEFAULT_TOL).unwrap();
        let fam = |a: f64| FamilyParams { eps: 0.5, t_shift: 0.0, a: vec![0.0, a, 0.0, 0.0, 0.0] };
        let ratio = expansion_error(&fam(0.1), &o, (2.0, 8.0), 61).unwrap()
            / expansion_error(&fam(0.05), &o, (2.0, 8.0), 61).unwrap();
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
        let slope = expansion_decay_slope(&fam(0.1), &o, (2.0, 2.0 + 2.0 * o.period)).unwrap();
        assert!((slope + 2.0).abs() < 0.01, "{slope}");
    }
}
