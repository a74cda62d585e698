//! Adaptive Dormand-Prince 5(4) integration with continuous output.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

type State<const D: usize> = [f64; D];

fn lin<const D: usize>(y: &State<D>, h: f64, terms: &[(f64, &State<D>)]) -> State<D> {
    let mut out = *y;
    for &(c, k) in terms {
        for (o, v) in out.iter_mut().zip(k) {
            *o += h * c * v;
        }
    }
    out
}

struct Stages<const D: usize> {
    k: [State<D>; 7],
    y_new: State<D>,
}

fn stages<const D: usize, F>(f: &mut F, t: f64, y: &State<D>, k1: State<D>, h: f64) -> Stages<D>
where
    F: FnMut(f64, &State<D>) -> State<D>,
{
    let k2 = f(t + C2 * h, &lin(y, h, &[(A21, &k1)]));
    let k3 = f(t + C3 * h, &lin(y, h, &[(A31, &k1), (A32, &k2)]));
    let k4 = f(t + C4 * h, &lin(y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
    let k5 = f(t + C5 * h, &lin(y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
    let k6 = f(
        t + h,
        &lin(y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
    );
    let y_new = lin(y, h, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
    let k7 = f(t + h, &y_new);
    Stages { k: [k1, k2, k3, k4, k5, k6, k7], y_new }
}

/// One accepted step together with its continuous extension.
#[derive(Debug, Clone)]
pub struct StepView<const D: usize> {
    pub t0: f64,
    pub t1: f64,
    pub y0: State<D>,
    pub y1: State<D>,
    rcont: [State<D>; 5],
}

impl<const D: usize> StepView<D> {
    fn new(t0: f64, h: f64, y0: State<D>, s: &Stages<D>) -> Self {
        let [k1, _, k3, k4, k5, k6, k7] = &s.k;
        let mut rcont = [[0.0; D]; 5];
        for i in 0..D {
            let ydiff = s.y_new[i] - y0[i];
            let bspl = h * k1[i] - ydiff;
            rcont[0][i] = y0[i];
            rcont[1][i] = ydiff;
            rcont[2][i] = bspl;
            rcont[3][i] = ydiff - h * k7[i] - bspl;
            rcont[4][i] =
                h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        }
        Self { t0, t1: t0 + h, y0, y1: s.y_new, rcont }
    }

    /// Fourth-order interpolant inside the step.
    pub fn dense(&self, t: f64) -> State<D> {
        let th = (t - self.t0) / (self.t1 - self.t0);
        let th1 = 1.0 - th;
        let r = &self.rcont;
        let mut out = [0.0; D];
        for i in 0..D {
            out[i] = r[0][i] + th * (r[1][i] + th1 * (r[2][i] + th * (r[3][i] + th1 * r[4][i])));
        }
        out
    }

    /// Time in `[t0, t1]` where `g` along the interpolant changes sign, if it does.
    pub fn locate(&self, g: impl Fn(&State<D>) -> f64) -> Option<f64> {
        let (mut a, mut b) = (self.t0, self.t1);
        let (mut ga, gb) = (g(&self.y0), g(&self.y1));
        if ga == 0.0 {
            return Some(a);
        }
        if ga.signum() == gb.signum() {
            return None;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            let gm = g(&self.dense(m));
            if gm.signum() == ga.signum() {
                a = m;
                ga = gm;
            } else {
                b = m;
            }
        }
        Some(0.5 * (a + b))
    }
}

/// Whether integration should continue after an accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Adaptive integrator settings.
#[derive(Debug, Clone, Copy)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Self { rtol: 1e-12, atol: 1e-14, h_max: f64::INFINITY, max_steps: 2_000_000 }
    }
}

/// Result of a completed integration.
#[derive(Debug, Clone, Copy)]
pub struct Outcome<const D: usize> {
    pub t: f64,
    pub y: State<D>,
    pub steps: usize,
    pub stopped: bool,
}

impl Dopri5 {
    pub fn with_tol(tol: f64) -> Self {
        Self { rtol: tol, atol: tol * 1e-2, ..Self::default() }
    }

    pub fn with_max_step(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self
    }

    /// Integrate from `t0` towards `t_end` (either direction), calling
    /// `observer` after every accepted step.
    pub fn solve<const D: usize, F, O>(
        &self,
        mut f: F,
        t0: f64,
        y0: State<D>,
        t_end: f64,
        mut observer: O,
    ) -> Result<Outcome<D>>
    where
        F: FnMut(f64, &State<D>) -> State<D>,
        O: FnMut(&StepView<D>) -> Flow,
    {
        let dir = if t_end >= t0 { 1.0 } else { -1.0 };
        let span = (t_end - t0).abs();
        if span == 0.0 {
            return Ok(Outcome { t: t0, y: y0, steps: 0, stopped: false });
        }
        let mut t = t0;
        let mut y = y0;
        let mut k1 = f(t, &y);
        let mut h = dir * self.initial_step(&y, &k1).min(span).min(self.h_max);
        let mut steps = 0;
        let mut reject_streak = 0;
        loop {
            if steps >= self.max_steps {
                return Err(Error::numerical(format!("step budget exhausted at t = {t}")));
            }
            let remaining = t_end - t;
            let last = h.abs() >= remaining.abs();
            if last {
                h = remaining;
            }
            let st = stages(&mut f, t, &y, k1, h);
            let err = self.error_norm(&y, &st, h);
            if !err.is_finite() {
                reject_streak += 1;
                if reject_streak > 60 {
                    return Err(Error::numerical(format!("non-finite state near t = {t}")));
                }
                h *= 0.2;
                continue;
            }
            if err <= 1.0 {
                steps += 1;
                reject_streak = 0;
                let view = StepView::new(t, h, y, &st);
                t = if last { t_end } else { t + h };
                y = st.y_new;
                k1 = st.k[6];
                if observer(&view) == Flow::Stop {
                    return Ok(Outcome { t, y, steps, stopped: true });
                }
                if last {
                    return Ok(Outcome { t, y, steps, stopped: false });
                }
                let fac = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
                h = dir * (h.abs() * fac).min(self.h_max);
            } else {
                reject_streak += 1;
                if reject_streak > 60 || h.abs() < 1e-14 * (1.0 + t.abs()) {
                    return Err(Error::numerical(format!("step size underflow at t = {t}")));
                }
                let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                h *= fac;
            }
        }
    }

    fn error_norm<const D: usize>(&self, y: &State<D>, st: &Stages<D>, h: f64) -> f64 {
        let [k1, _, k3, k4, k5, k6, k7] = &st.k;
        let mut acc = 0.0;
        for i in 0..D {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sk = self.atol + self.rtol * y[i].abs().max(st.y_new[i].abs());
            acc += (e / sk).powi(2);
        }
        (acc / D as f64).sqrt()
    }

    fn initial_step<const D: usize>(&self, y: &State<D>, dy: &State<D>) -> f64 {
        let mut d0: f64 = 0.0;
        let mut d1: f64 = 0.0;
        for i in 0..D {
            let sk = self.atol + self.rtol * y[i].abs();
            d0 += (y[i] / sk).powi(2);
            d1 += (dy[i] / sk).powi(2);
        }
        let (d0, d1) = ((d0 / D as f64).sqrt(), (d1 / D as f64).sqrt());
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0.min(0.1)
    }
}

/// A single fifth-order step of size `h`, without error control.
pub fn dopri_step<const D: usize, F>(mut f: F, t: f64, y: &State<D>, h: f64) -> State<D>
where
    F: FnMut(f64, &State<D>) -> State<D>,
{
    let k1 = f(t, y);
    stages(&mut f, t, y, k1, h).y_new
}

/// Fixed-step fifth-order integration from `t` over `h` in `steps` substeps.
pub fn dopri_fixed<const D: usize, F>(mut f: F, t: f64, y: &State<D>, h: f64, steps: usize) -> State<D>
where
    F: FnMut(f64, &State<D>) -> State<D>,
{
    let dt = h / steps.max(1) as f64;
    let mut y = *y;
    for i in 0..steps.max(1) {
        y = dopri_step(&mut f, t + i as f64 * dt, &y, dt);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_over_many_periods() {
        let ode = Dopri5::with_tol(1e-12);
        let tau = std::f64::consts::TAU;
        let out = ode
            .solve(|_, y: &[f64; 2]| [y[1], -y[0]], 0.0, [1.0, 0.0], 10.0 * tau, |_| Flow::Continue)
            .unwrap();
        assert!((out.y[0] - 1.0).abs() < 1e-9);
        assert!(out.y[1].abs() < 1e-9);
    }

    #[test]
    fn backward_integration_returns_to_start() {
        let ode = Dopri5::with_tol(1e-12);
        let f = |t: f64, y: &[f64; 1]| [t.cos() * y[0]];
        let fwd = ode.solve(f, 0.0, [1.0], 3.0, |_| Flow::Continue).unwrap();
        assert!((fwd.y[0] - 3.0f64.sin().exp()).abs() < 1e-10);
        let back = ode.solve(f, 3.0, fwd.y, 0.0, |_| Flow::Continue).unwrap();
        assert!((back.y[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dense_output_and_event_location() {
        let ode = Dopri5::with_tol(1e-12).with_max_step(0.3);
        let mut event = None;
        ode.solve(|_, y: &[f64; 2]| [y[1], -y[0]], 0.0, [0.0, 1.0], 5.0, |s| {
            let mid = 0.5 * (s.t0 + s.t1);
            assert!((s.dense(mid)[0] - mid.sin()).abs() < 1e-8);
            if let Some(t) = s.locate(|y| y[1]) {
                event = Some(t);
                return Flow::Stop;
            }
            Flow::Continue
        })
        .unwrap();
        assert!((event.unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-8);
    }

    #[test]
    fn fixed_steps_are_fifth_order() {
        let f = |_: f64, y: &[f64; 1]| [y[0]];
        let e1 = (dopri_fixed(f, 0.0, &[1.0], 1.0, 10)[0] - 1f64.exp()).abs();
        let e2 = (dopri_fixed(f, 0.0, &[1.0], 1.0, 20)[0] - 1f64.exp()).abs();
        let order = (e1 / e2).log2();
        assert!((order - 5.0).abs() < 0.3, "observed order {order}");
    }
}
