//! Integration of Lorentz and connection geodesics, ensemble transport along
//! characteristics, lab-time resampling and the Liouville residual.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connections::{Connection, MomentSource};
use crate::distribution::{fmt_f64, HyperboloidEnsemble, MomentSet, PhaseSample};
use crate::fields::FaradayField;
use crate::geometry::Metric;
use crate::{Error, Result, M4, V4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk4,
    Rk45,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Fixed step for `rk4`, initial step for `rk45`.
    pub step: f64,
    /// Local error tolerance for `rk45`.
    pub tol: f64,
    /// Project the velocity back onto the hyperboloid after each Lorentz step.
    pub renormalize: bool,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig { method: Method::Rk4, step: 1e-3, tol: 1e-10, renormalize: true, max_steps: 50_000_000 }
    }
}

impl IntegratorConfig {
    pub fn rk4(step: f64) -> Self {
        IntegratorConfig { step, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::invalid("step", "must be positive"));
        }
        if self.method == Method::Rk45 && !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Param {
    ProperTime,
    LabTime,
}

impl Param {
    pub fn as_str(&self) -> &'static str {
        match self {
            Param::ProperTime => "tau",
            Param::LabTime => "t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub s: f64,
    pub x: V4,
    pub y: V4,
}

impl TrajectoryState {
    pub fn new(s: f64, x: V4, y: V4) -> Self {
        TrajectoryState { s, x, y }
    }
}

/// States of one integration, with the acceleration `dy/dtau` at each state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub param: Param,
    pub states: Vec<TrajectoryState>,
    pub accels: Vec<V4>,
    pub steps: usize,
    pub rejected: usize,
    /// Largest `|eta(y,y) - 1|` over the stored states.
    pub max_drift: f64,
}

impl TrajectoryRecord {
    pub fn last(&self) -> &TrajectoryState {
        self.states.last().expect("records hold at least the initial state")
    }

    /// Trajectory table `s, param_kind, x0..x3, y0..y3, eta_yy`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["s", "param_kind", "x0", "x1", "x2", "x3", "y0", "y1", "y2", "y3", "eta_yy"])?;
        let m = Metric::minkowski();
        for st in &self.states {
            let mut rec = vec![fmt_f64(st.s), self.param.as_str().to_string()];
            rec.extend(st.x.iter().map(|v| fmt_f64(*v)));
            rec.extend(st.y.iter().map(|v| fmt_f64(*v)));
            rec.push(fmt_f64(m.norm_sq(&st.y)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Acceleration `dy/dtau` as a function of `(x, y)`.
pub trait Accel: Sync {
    fn accel(&self, x: &V4, y: &V4) -> Result<V4>;
}

impl<F: Fn(&V4, &V4) -> Result<V4> + Sync> Accel for F {
    fn accel(&self, x: &V4, y: &V4) -> Result<V4> {
        self(x, y)
    }
}

/// Lorentz force `F^i_j y^j`.
pub struct LorentzForce<'a>(pub &'a FaradayField);

impl Accel for LorentzForce<'_> {
    #[inline]
    fn accel(&self, x: &V4, y: &V4) -> Result<V4> {
        Ok(self.0.mixed(x) * y)
    }
}

/// Geodesic acceleration of a connection.
pub struct Geodesic<'a>(pub &'a dyn Connection);

impl Accel for Geodesic<'_> {
    #[inline]
    fn accel(&self, x: &V4, y: &V4) -> Result<V4> {
        self.0.accel(x, y)
    }
}

fn finite(x: &V4, y: &V4) -> bool {
    x.iter().chain(y.iter()).all(|v| v.is_finite())
}

fn project(y: &V4) -> V4 {
    let n = Metric::minkowski().norm_sq(y);
    if n > 0.0 {
        y / n.sqrt()
    } else {
        *y
    }
}

/// One classical RK4 step of `x' = y, y' = a(x, y)` given `a0 = a(x, y)`.
fn rk4_step(f: &dyn Accel, x: &V4, y: &V4, a0: &V4, h: f64) -> Result<(V4, V4)> {
    let (k1x, k1y) = (*y, *a0);
    let (x2, y2) = (x + 0.5 * h * k1x, y + 0.5 * h * k1y);
    let (k2x, k2y) = (y2, f.accel(&x2, &y2)?);
    let (x3, y3) = (x + 0.5 * h * k2x, y + 0.5 * h * k2y);
    let (k3x, k3y) = (y3, f.accel(&x3, &y3)?);
    let (x4, y4) = (x + h * k3x, y + h * k3y);
    let (k4x, k4y) = (y4, f.accel(&x4, &y4)?);
    Ok((
        x + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        y + (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
    ))
}

// Dormand-Prince 5(4) tableau. The right-hand sides are autonomous, so the
// stage times are not needed.
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// One Dormand-Prince attempt; returns the fifth-order state and the error norm.
fn dp_step(f: &dyn Accel, x: &V4, y: &V4, a0: &V4, h: f64) -> Result<(V4, V4, f64)> {
    let mut kx = [V4::zeros(); 7];
    let mut ky = [V4::zeros(); 7];
    kx[0] = *y;
    ky[0] = *a0;
    for s in 1..7 {
        let mut xs = *x;
        let mut ys = *y;
        for j in 0..s {
            xs += h * DP_A[s][j] * kx[j];
            ys += h * DP_A[s][j] * ky[j];
        }
        kx[s] = ys;
        ky[s] = f.accel(&xs, &ys)?;
    }
    let mut xn = *x;
    let mut yn = *y;
    for j in 0..6 {
        xn += h * DP_A[6][j] * kx[j];
        yn += h * DP_A[6][j] * ky[j];
    }
    let mut ex = V4::zeros();
    let mut ey = V4::zeros();
    for j in 0..7 {
        ex += h * DP_E[j] * kx[j];
        ey += h * DP_E[j] * ky[j];
    }
    let scale = 1.0 + x.amax().max(xn.amax()).max(y.amax()).max(yn.amax());
    Ok((xn, yn, ex.amax().max(ey.amax()) / scale))
}

/// Stepper shared by every push: advances `(x, y)` in the parameter `tau`.
struct Stepper<'a> {
    f: &'a dyn Accel,
    cfg: &'a IntegratorConfig,
    renorm: bool,
    module: &'static str,
    h: f64,
    steps: usize,
    rejected: usize,
}

impl<'a> Stepper<'a> {
    fn new(f: &'a dyn Accel, cfg: &'a IntegratorConfig, renorm: bool, module: &'static str, dir: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Stepper { f, cfg, renorm, module, h: dir * cfg.step, steps: 0, rejected: 0 })
    }

    /// Advance by at most `limit` in the travel direction; returns the new
    /// state, its acceleration and the step actually taken.
    fn step(&mut self, tau: f64, x: &V4, y: &V4, a: &V4, limit: Option<f64>) -> Result<(V4, V4, V4, f64)> {
        if self.steps >= self.cfg.max_steps {
            return Err(Error::invalid("max_steps", format!("exceeded in {}", self.module)));
        }
        let clip = |h: f64| match limit {
            Some(l) if h.abs() > l.abs() => l,
            _ => h,
        };
        let (xn, mut yn, taken) = match self.cfg.method {
            Method::Rk4 => {
                let h = clip(self.h);
                let (xn, yn) = rk4_step(self.f, x, y, a, h)?;
                (xn, yn, h)
            }
            Method::Rk45 => loop {
                let h = clip(self.h);
                if h.abs() < 1e-14 * tau.abs().max(1.0) {
                    return Err(Error::StepUnderflow { module: self.module, s: tau });
                }
                let (xn, yn, err) = dp_step(self.f, x, y, a, h)?;
                let fac = if err > 0.0 { 0.9 * (self.cfg.tol / err).powf(0.2) } else { 5.0 };
                if err <= self.cfg.tol && err.is_finite() {
                    self.h *= fac.clamp(0.2, 5.0);
                    break (xn, yn, h);
                }
                self.rejected += 1;
                self.h *= if err.is_finite() { fac.clamp(0.1, 0.9) } else { 0.1 };
            },
        };
        self.steps += 1;
        if self.renorm {
            yn = project(&yn);
        }
        if !finite(&xn, &yn) {
            return Err(Error::NonFinite { module: self.module, step: self.steps });
        }
        let an = self.f.accel(&xn, &yn)?;
        Ok((xn, yn, an, taken))
    }
}

/// Integrate `x' = y, y' = f(x, y)` over the proper-time span.
pub fn push(
    f: &dyn Accel,
    init: &TrajectoryState,
    span: (f64, f64),
    cfg: &IntegratorConfig,
    renorm: bool,
    module: &'static str,
) -> Result<TrajectoryRecord> {
    let (s0, s1) = span;
    let dir = if s1 >= s0 { 1.0 } else { -1.0 };
    let mut st = Stepper::new(f, cfg, renorm, module, dir)?;
    let metric = Metric::minkowski();
    let (mut x, mut y) = (init.x, init.y);
    if !finite(&x, &y) {
        return Err(Error::NonFinite { module, step: 0 });
    }
    let mut a = f.accel(&x, &y)?;
    let mut tau = s0;
    let mut states = vec![TrajectoryState::new(tau, x, y)];
    let mut accels = vec![a];
    let mut max_drift = (metric.norm_sq(&y) - 1.0).abs();
    let eps = 1e-12 * cfg.step;
    while (s1 - tau) * dir > eps {
        let (xn, yn, an, h) = st.step(tau, &x, &y, &a, Some(s1 - tau))?;
        tau = if ((s1 - tau) - h).abs() <= eps { s1 } else { tau + h };
        x = xn;
        y = yn;
        a = an;
        max_drift = max_drift.max((metric.norm_sq(&y) - 1.0).abs());
        states.push(TrajectoryState::new(tau, x, y));
        accels.push(a);
    }
    Ok(TrajectoryRecord {
        param: Param::ProperTime,
        states,
        accels,
        steps: st.steps,
        rejected: st.rejected,
        max_drift,
    })
}

/// Lorentz push `dx/dtau = y, dy/dtau = F y`.
pub fn push_lorentz(
    field: &FaradayField,
    init: &TrajectoryState,
    span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<TrajectoryRecord> {
    let r = Metric::minkowski().norm_sq(&init.y) - 1.0;
    if r.abs() > 1e-10 {
        return Err(Error::OffHyperboloid { index: 0, residual: r });
    }
    push(&LorentzForce(field), init, span, cfg, cfg.renormalize, "push_lorentz")
}

/// Geodesic push of a connection; no projection onto the hyperboloid.
pub fn push_connection(
    conn: &dyn Connection,
    init: &TrajectoryState,
    span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<TrajectoryRecord> {
    push(&Geodesic(conn), init, span, cfg, false, "push_connection")
}

#[inline]
fn h00(t: f64) -> f64 {
    (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t)
}
#[inline]
fn h10(t: f64) -> f64 {
    t * (1.0 - t) * (1.0 - t)
}
#[inline]
fn h01(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}
#[inline]
fn h11(t: f64) -> f64 {
    t * t * (t - 1.0)
}

/// Cubic Hermite interpolant on `[0, h]` at fraction `t`.
#[inline]
pub fn hermite(p0: &V4, v0: &V4, p1: &V4, v1: &V4, h: f64, t: f64) -> V4 {
    h00(t) * p0 + (h10(t) * h) * v0 + h01(t) * p1 + (h11(t) * h) * v1
}

#[inline]
fn hermite_scalar(p0: f64, v0: f64, p1: f64, v1: f64, h: f64, t: f64) -> f64 {
    h00(t) * p0 + h10(t) * h * v0 + h01(t) * p1 + h11(t) * h * v1
}

#[inline]
fn hermite_scalar_dt(p0: f64, v0: f64, p1: f64, v1: f64, h: f64, t: f64) -> f64 {
    let d00 = 6.0 * t * t - 6.0 * t;
    let d10 = 3.0 * t * t - 4.0 * t + 1.0;
    let d01 = -d00;
    let d11 = 3.0 * t * t - 2.0 * t;
    d00 * p0 + d10 * h * v0 + d01 * p1 + d11 * h * v1
}

/// Fraction of the step at which the interpolated `x^0` equals `target`.
fn solve_crossing(x0: f64, y0: f64, x1: f64, y1: f64, h: f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let g = |t: f64| hermite_scalar(x0, y0, x1, y1, h, t) - target;
    let rising = x1 >= x0;
    let mut t = if x1 != x0 { ((target - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 0.5 };
    for _ in 0..60 {
        let v = g(t);
        if v == 0.0 {
            return t;
        }
        if (v < 0.0) == rising {
            lo = t;
        } else {
            hi = t;
        }
        let d = hermite_scalar_dt(x0, y0, x1, y1, h, t);
        let mut tn = t - v / d;
        if !(tn > lo && tn < hi) || !tn.is_finite() {
            tn = 0.5 * (lo + hi);
        }
        if (tn - t).abs() < 1e-16 {
            return tn;
        }
        t = tn;
    }
    t
}

/// State at a requested lab time, with its acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceState {
    pub tau: f64,
    pub x: V4,
    pub y: V4,
    pub a: V4,
}

/// Integrate from `init` and return the states at the given lab times, which
/// must be ordered in the direction of travel.
pub fn sample_lab_times(
    f: &dyn Accel,
    init: &TrajectoryState,
    times: &[f64],
    cfg: &IntegratorConfig,
    renorm: bool,
    module: &'static str,
) -> Result<Vec<SliceState>> {
    let mut out = Vec::with_capacity(times.len());
    if times.is_empty() {
        return Ok(out);
    }
    let start = init.x[0];
    let dir = if times[times.len() - 1] >= start { 1.0 } else { -1.0 };
    if times.windows(2).any(|w| (w[1] - w[0]) * dir < 0.0) || (times[0] - start) * dir < 0.0 {
        return Err(Error::invalid("times", "must be ordered away from the initial lab time"));
    }
    if !(init.y[0] > 0.0) {
        return Err(Error::NotTimelike(init.y[0]));
    }
    let mut st = Stepper::new(f, cfg, renorm, module, dir)?;
    let (mut x, mut y) = (init.x, init.y);
    let mut a = f.accel(&x, &y)?;
    let mut tau = init.s;
    let mut k = 0;
    while k < times.len() && times[k] == start {
        out.push(SliceState { tau, x, y, a });
        k += 1;
    }
    while k < times.len() {
        let (xn, yn, an, h) = st.step(tau, &x, &y, &a, None)?;
        if !(yn[0] > 0.0) {
            return Err(Error::NotTimelike(yn[0]));
        }
        while k < times.len() && (xn[0] - times[k]) * dir >= 0.0 {
            let th = solve_crossing(x[0], y[0], xn[0], yn[0], h, times[k]);
            let xs = hermite(&x, &y, &xn, &yn, h, th);
            let mut ys = hermite(&y, &a, &yn, &an, h, th);
            if renorm {
                ys = project(&ys);
            }
            let mut xs = xs;
            xs[0] = times[k];
            out.push(SliceState { tau: tau + th * h, x: xs, y: ys, a: f.accel(&xs, &ys)? });
            k += 1;
        }
        tau += h;
        x = xn;
        y = yn;
        a = an;
    }
    Ok(out)
}

/// Resample a proper-time record at uniform lab times `t0, t0 + dt, ...`.
pub fn to_lab_time(rec: &TrajectoryRecord, dt: f64) -> Result<TrajectoryRecord> {
    if rec.param != Param::ProperTime {
        return Err(Error::invalid("record", "already parameterized by lab time"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    let st = &rec.states;
    for w in st.windows(2) {
        if !(w[1].x[0] > w[0].x[0]) || !(w[1].s > w[0].s) {
            return Err(Error::invalid("record", "lab time is not increasing along the record"));
        }
    }
    let (t0, t1) = (st[0].x[0], st[st.len() - 1].x[0]);
    let n = ((t1 - t0) / dt * (1.0 + 1e-12)).floor() as usize;
    let mut states = Vec::with_capacity(n + 1);
    let mut accels = Vec::with_capacity(n + 1);
    let mut j = 0;
    for k in 0..=n {
        let t = t0 + k as f64 * dt;
        while j + 2 < st.len() && st[j + 1].x[0] < t {
            j += 1;
        }
        let (a, b) = (&st[j], &st[j + 1]);
        let h = b.s - a.s;
        let th = solve_crossing(a.x[0], a.y[0], b.x[0], b.y[0], h, t);
        let mut x = hermite(&a.x, &a.y, &b.x, &b.y, h, th);
        x[0] = t;
        let y = hermite(&a.y, &rec.accels[j], &b.y, &rec.accels[j + 1], h, th);
        states.push(TrajectoryState::new(t, x, y));
        accels.push((1.0 - th) * rec.accels[j] + th * rec.accels[j + 1]);
    }
    let m = Metric::minkowski();
    let max_drift = states.iter().map(|s| (m.norm_sq(&s.y) - 1.0).abs()).fold(0.0, f64::max);
    Ok(TrajectoryRecord { param: Param::LabTime, states, accels, steps: rec.steps, rejected: rec.rejected, max_drift })
}

/// Samples and accelerations of an ensemble at one lab time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSlice {
    pub t: f64,
    pub samples: Vec<PhaseSample>,
    pub accels: Vec<V4>,
}

impl EnsembleSlice {
    pub fn moments(&self) -> Result<MomentSet> {
        crate::distribution::moments_of(self.samples.iter().map(|s| (s.y, s.w)))
    }

    /// Lab-time rates of the moments, using `dy/dt = a / y^0`.
    pub fn moment_rates(&self) -> Result<MomentSet> {
        let mut acc = MomentSet::zero();
        for (s, a) in self.samples.iter().zip(&self.accels) {
            let v = a / s.y[0];
            let w = s.w;
            acc.vol += w;
            acc.mean += w * v;
            let vy = v * s.y.transpose();
            let sym = vy + vy.transpose();
            acc.second += w * sym;
            let yy = s.y * s.y.transpose();
            for m in 0..4 {
                acc.third[m] += w * (v[m] * yy + s.y[m] * sym);
            }
        }
        acc.normalized()
    }

    /// Validated hyperboloid ensemble; fails for off-shell samples.
    pub fn to_ensemble(&self) -> Result<HyperboloidEnsemble> {
        let mut e = HyperboloidEnsemble::new(self.samples.clone(), crate::geometry::Observer::lab(), Default::default())?;
        e.t = self.t;
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSeries {
    pub slices: Vec<EnsembleSlice>,
}

impl EnsembleSeries {
    pub fn times(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.t).collect()
    }
}

/// Transport every sample with `f` and slice at the lab times.
pub fn transport_with(
    f: &dyn Accel,
    ens: &HyperboloidEnsemble,
    times: &[f64],
    cfg: &IntegratorConfig,
    renorm: bool,
    module: &'static str,
) -> Result<EnsembleSeries> {
    if ens.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let per: Vec<Vec<SliceState>> = ens
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            sample_lab_times(f, &TrajectoryState::new(0.0, s.x, s.y), times, cfg, renorm, module)
                .map_err(|e| Error::Sample { index: i, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let slices = times
        .iter()
        .enumerate()
        .map(|(k, &t)| EnsembleSlice {
            t,
            samples: per.iter().zip(&ens.samples).map(|(p, s)| PhaseSample::new(p[k].x, p[k].y, s.w)).collect(),
            accels: per.iter().map(|p| p[k].a).collect(),
        })
        .collect();
    Ok(EnsembleSeries { slices })
}

/// Vlasov transport: every sample follows the Lorentz flow.
pub fn transport_ensemble(
    field: &FaradayField,
    ens: &HyperboloidEnsemble,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<EnsembleSeries> {
    transport_with(&LorentzForce(field), ens, times, cfg, cfg.renormalize, "transport_ensemble")
}

/// Averaged Vlasov transport: every sample follows the geodesics of `conn`.
pub fn transport_ensemble_averaged(
    conn: &dyn Connection,
    ens: &HyperboloidEnsemble,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<EnsembleSeries> {
    transport_with(&Geodesic(conn), ens, times, cfg, false, "transport_ensemble_averaged")
}

/// Where the averaged flow takes its moments from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMode {
    /// Moments of the initial ensemble, held fixed.
    Frozen,
    /// Moments of the Lorentz-transported ensemble at the current lab time.
    Transported,
}

/// An ensemble under the Lorentz flow together with tracers under the
/// averaged Lorentz flow built from that ensemble's moments.
#[derive(Debug, Clone)]
pub struct PairedTransport {
    pub lorentz: EnsembleSeries,
    /// `tracers[k][j]` is tracer `j` at output time `k`.
    pub tracers: Vec<Vec<SliceState>>,
    pub moments: Vec<MomentSet>,
}

impl PairedTransport {
    /// Tracers at every output time as ensemble slices with the given weights.
    pub fn tracer_series(&self, weights: &[f64]) -> EnsembleSeries {
        let slices = self
            .tracers
            .iter()
            .zip(&self.lorentz.slices)
            .map(|(tr, sl)| EnsembleSlice {
                t: sl.t,
                samples: tr.iter().zip(weights).map(|(s, w)| PhaseSample::new(s.x, s.y, *w)).collect(),
                accels: tr.iter().map(|s| s.a).collect(),
            })
            .collect();
        EnsembleSeries { slices }
    }
}

const CHUNK: usize = 256;

/// Packed moment sums using the symmetry of the second and third moments.
#[derive(Clone, Copy)]
struct PackedSums {
    vol: f64,
    m1: [f64; 4],
    m2: [f64; 10],
    m3: [f64; 20],
}

impl PackedSums {
    const ZERO: PackedSums = PackedSums { vol: 0.0, m1: [0.0; 4], m2: [0.0; 10], m3: [0.0; 20] };

    #[inline]
    fn add(&mut self, y: &V4, w: f64) {
        self.vol += w;
        let mut a = 0;
        let mut b = 0;
        for i in 0..4 {
            let wi = w * y[i];
            self.m1[i] += wi;
            for j in i..4 {
                let wij = wi * y[j];
                self.m2[a] += wij;
                a += 1;
                for k in j..4 {
                    self.m3[b] += wij * y[k];
                    b += 1;
                }
            }
        }
    }

    fn merge(&mut self, o: &PackedSums) {
        self.vol += o.vol;
        self.m1.iter_mut().zip(&o.m1).for_each(|(a, b)| *a += b);
        self.m2.iter_mut().zip(&o.m2).for_each(|(a, b)| *a += b);
        self.m3.iter_mut().zip(&o.m3).for_each(|(a, b)| *a += b);
    }

    fn unpack(&self) -> MomentSet {
        let mut m = MomentSet::zero();
        m.vol = self.vol;
        m.mean = V4::from_column_slice(&self.m1);
        let mut a = 0;
        let mut b = 0;
        for i in 0..4 {
            for j in i..4 {
                m.second[(i, j)] = self.m2[a];
                m.second[(j, i)] = self.m2[a];
                a += 1;
                for k in j..4 {
                    let v = self.m3[b];
                    b += 1;
                    for (p, q, r) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                        m.third[p][(q, r)] = v;
                    }
                }
            }
        }
        m
    }
}

/// Moments with a reduction order fixed by the chunk size, independent of
/// the number of worker threads.
pub fn chunked_moments(ys: &[V4], ws: &[f64]) -> Result<MomentSet> {
    let parts: Vec<PackedSums> = ys
        .par_chunks(CHUNK)
        .zip(ws.par_chunks(CHUNK))
        .map(|(yc, wc)| {
            let mut m = PackedSums::ZERO;
            for (y, w) in yc.iter().zip(wc) {
                m.add(y, *w);
            }
            m
        })
        .collect();
    let mut acc = PackedSums::ZERO;
    for p in &parts {
        acc.merge(p);
    }
    acc.unpack().normalized()
}

struct PairState {
    xs: Vec<V4>,
    ys: Vec<V4>,
    tx: Vec<V4>,
    ty: Vec<V4>,
    ttau: Vec<f64>,
}

struct PairRate {
    dxs: Vec<V4>,
    dys: Vec<V4>,
    dtx: Vec<V4>,
    dty: Vec<V4>,
    dtau: Vec<f64>,
}

fn axpy(a: &[V4], h: f64, k: &[V4]) -> Vec<V4> {
    a.par_iter().zip(k.par_iter()).map(|(a, k)| a + h * k).collect()
}

/// Advance an ensemble with the Lorentz flow and tracers with the averaged
/// flow in lab time, sharing one RK4 stepper. With transported moments the
/// averaged coefficients at every stage use the moments of the ensemble at
/// that stage, so no interpolation in time enters the comparison.
///
/// The lab step is `cfg.step` times the smallest initial `y^0`, so the proper
/// time step stays at or below `cfg.step` while energies do not drop.
pub fn co_transport(
    field: &FaradayField,
    ens: &HyperboloidEnsemble,
    tracers: &[TrajectoryState],
    times: &[f64],
    cfg: &IntegratorConfig,
    mode: MomentMode,
) -> Result<PairedTransport> {
    cfg.validate()?;
    if ens.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let t0 = ens.samples[0].x[0];
    if ens.samples.iter().any(|s| (s.x[0] - t0).abs() > 1e-12) || tracers.iter().any(|s| (s.x[0] - t0).abs() > 1e-12) {
        return Err(Error::invalid("ensemble", "all samples and tracers must start at one lab time"));
    }
    if times.first().map_or(false, |&t| t < t0) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("times", "must be ascending and not before the initial lab time"));
    }
    let metric = Metric::minkowski();
    let ws: Vec<f64> = ens.samples.iter().map(|s| s.w).collect();
    let frozen = moments_frozen(ens)?;
    let rate = |s: &PairState| -> Result<(PairRate, MomentSet)> {
        let (dxs, dys): (Vec<V4>, Vec<V4>) = s
            .xs
            .par_iter()
            .zip(s.ys.par_iter())
            .map(|(x, y)| (y / y[0], field.mixed(x) * y / y[0]))
            .unzip();
        let m = match mode {
            MomentMode::Frozen => frozen.clone(),
            MomentMode::Transported => chunked_moments(&s.ys, &ws)?,
        };
        let tr: Vec<(V4, V4, f64)> = s
            .tx
            .par_iter()
            .zip(s.ty.par_iter())
            .map(|(x, y)| {
                let phi = -field.mixed(x);
                let a = -crate::connections::averaged_lorentz_contract(&metric, &phi, &m, y);
                (y / y[0], a / y[0], 1.0 / y[0])
            })
            .collect();
        let dtx = tr.iter().map(|r| r.0).collect();
        let dty = tr.iter().map(|r| r.1).collect();
        let dtau = tr.iter().map(|r| r.2).collect();
        Ok((PairRate { dxs, dys, dtx, dty, dtau }, m))
    };
    let advance = |s: &PairState, h: f64, k: &PairRate| PairState {
        xs: axpy(&s.xs, h, &k.dxs),
        ys: axpy(&s.ys, h, &k.dys),
        tx: axpy(&s.tx, h, &k.dtx),
        ty: axpy(&s.ty, h, &k.dty),
        ttau: s.ttau.iter().zip(&k.dtau).map(|(a, b)| a + h * b).collect(),
    };
    let mut s = PairState {
        xs: ens.samples.iter().map(|p| p.x).collect(),
        ys: ens.samples.iter().map(|p| p.y).collect(),
        tx: tracers.iter().map(|p| p.x).collect(),
        ty: tracers.iter().map(|p| p.y).collect(),
        ttau: tracers.iter().map(|p| p.s).collect(),
    };
    let mut out = PairedTransport { lorentz: EnsembleSeries { slices: Vec::new() }, tracers: Vec::new(), moments: Vec::new() };
    let y0_min = s.ys.iter().chain(&s.ty).map(|y| y[0]).fold(f64::INFINITY, f64::min).max(1.0);
    let lab_step = cfg.step * y0_min;
    let mut t = t0;
    let mut steps = 0usize;
    for &target in times {
        let n = ((target - t) / lab_step * (1.0 - 1e-12)).ceil().max(0.0) as usize;
        let h = if n > 0 { (target - t) / n as f64 } else { 0.0 };
        for _ in 0..n {
            steps += 1;
            if steps > cfg.max_steps {
                return Err(Error::invalid("max_steps", "exceeded in co_transport"));
            }
            let (k1, _) = rate(&s)?;
            let s2 = advance(&s, 0.5 * h, &k1);
            let (k2, _) = rate(&s2)?;
            let s3 = advance(&s, 0.5 * h, &k2);
            let (k3, _) = rate(&s3)?;
            let s4 = advance(&s, h, &k3);
            let (k4, _) = rate(&s4)?;
            let comb = |a: &[V4], b: &[V4], c: &[V4], d: &[V4], base: &[V4]| -> Vec<V4> {
                (0..base.len()).into_par_iter().map(|i| base[i] + (h / 6.0) * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i])).collect()
            };
            let mut ys = comb(&k1.dys, &k2.dys, &k3.dys, &k4.dys, &s.ys);
            if cfg.renormalize {
                ys.par_iter_mut().for_each(|y| *y = project(y));
            }
            let next = PairState {
                xs: comb(&k1.dxs, &k2.dxs, &k3.dxs, &k4.dxs, &s.xs),
                ys,
                tx: comb(&k1.dtx, &k2.dtx, &k3.dtx, &k4.dtx, &s.tx),
                ty: comb(&k1.dty, &k2.dty, &k3.dty, &k4.dty, &s.ty),
                ttau: (0..s.ttau.len())
                    .map(|i| s.ttau[i] + (h / 6.0) * (k1.dtau[i] + 2.0 * k2.dtau[i] + 2.0 * k3.dtau[i] + k4.dtau[i]))
                    .collect(),
            };
            if let Some(i) = next.xs.iter().zip(&next.ys).position(|(x, y)| !finite(x, y)) {
                return Err(Error::Sample { index: i, source: Box::new(Error::NonFinite { module: "co_transport", step: steps }) });
            }
            if let Some(i) = next.tx.iter().zip(&next.ty).position(|(x, y)| !finite(x, y) || !(y[0] > 0.0)) {
                return Err(Error::Sample { index: i, source: Box::new(Error::NonFinite { module: "co_transport", step: steps }) });
            }
            s = next;
        }
        t = target;
        for x in s.xs.iter_mut().chain(s.tx.iter_mut()) {
            x[0] = target;
        }
        let (k, m) = rate(&s)?;
        out.lorentz.slices.push(EnsembleSlice {
            t: target,
            samples: s.xs.iter().zip(&s.ys).zip(&ws).map(|((x, y), w)| PhaseSample::new(*x, *y, *w)).collect(),
            accels: k.dys.iter().zip(&s.ys).map(|(d, y)| d * y[0]).collect(),
        });
        out.tracers.push(
            (0..s.tx.len())
                .map(|i| SliceState { tau: s.ttau[i], x: s.tx[i], y: s.ty[i], a: k.dty[i] * s.ty[i][0] })
                .collect(),
        );
        out.moments.push(m);
    }
    Ok(out)
}

fn moments_frozen(ens: &HyperboloidEnsemble) -> Result<MomentSet> {
    let ys: Vec<V4> = ens.samples.iter().map(|s| s.y).collect();
    let ws: Vec<f64> = ens.samples.iter().map(|s| s.w).collect();
    chunked_moments(&ys, &ws)
}

/// Uniform lab-time grid `t0, t0 + dt, ..., t1`.
pub fn lab_grid(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
    let n = ((t1 - t0) / dt).round().max(1.0) as usize;
    (0..=n).map(|k| t0 + (t1 - t0) * k as f64 / n as f64).collect()
}

/// Ensemble moments tabulated at lab-time slices together with their exact
/// time derivatives, interpolated between slices by cubic Hermite splines.
#[derive(Debug, Clone)]
pub struct SliceMoments {
    pub times: Vec<f64>,
    pub values: Vec<MomentSet>,
    pub rates: Vec<MomentSet>,
}

impl SliceMoments {
    pub fn from_series(series: &EnsembleSeries) -> Result<Self> {
        if series.slices.len() < 2 {
            return Err(Error::invalid("series", "at least two slices are needed"));
        }
        let values = series.slices.iter().map(|s| s.moments()).collect::<Result<Vec<_>>>()?;
        let rates = series.slices.iter().map(|s| s.moment_rates()).collect::<Result<Vec<_>>>()?;
        Ok(SliceMoments { times: series.times(), values, rates })
    }

    /// Transport `ens` with the Lorentz flow and tabulate its moments.
    pub fn lorentz(field: &FaradayField, ens: &HyperboloidEnsemble, t1: f64, dt: f64, cfg: &IntegratorConfig) -> Result<Self> {
        let times = lab_grid(ens.t, t1, dt);
        SliceMoments::from_series(&transport_ensemble(field, ens, &times, cfg)?)
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let n = self.times.len();
        let (lo, hi) = (self.times[0], self.times[n - 1]);
        let margin = self.times[1] - self.times[0];
        if !(t >= lo - margin && t <= hi + margin) {
            return Err(Error::OutOfRange { what: "lab time", value: t, lo, hi });
        }
        let k = match self.times.partition_point(|&s| s <= t) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let h = self.times[k + 1] - self.times[k];
        Ok((k, (t - self.times[k]) / h))
    }

    pub fn at_time(&self, t: f64) -> Result<MomentSet> {
        let (k, th) = self.locate(t)?;
        let h = self.times[k + 1] - self.times[k];
        let a = self.values[k].combine(h00(th), &self.rates[k], h10(th) * h);
        let b = self.values[k + 1].combine(h01(th), &self.rates[k + 1], h11(th) * h);
        Ok(a.combine(1.0, &b, 1.0))
    }

    /// Time derivative of the interpolated moments.
    pub fn rate_at_time(&self, t: f64) -> Result<MomentSet> {
        let (k, th) = self.locate(t)?;
        let h = self.times[k + 1] - self.times[k];
        let d00 = (6.0 * th * th - 6.0 * th) / h;
        let d10 = 3.0 * th * th - 4.0 * th + 1.0;
        let d11 = 3.0 * th * th - 2.0 * th;
        let a = self.values[k].combine(d00, &self.rates[k], d10);
        let b = self.values[k + 1].combine(-d00, &self.rates[k + 1], d11);
        Ok(a.combine(1.0, &b, 1.0))
    }
}

impl MomentSource for SliceMoments {
    fn moments_at(&self, x: &V4) -> Result<MomentSet> {
        self.at_time(x[0])
    }
}

/// Shared handle to a moment source.
pub fn shared<M: MomentSource + 'static>(m: M) -> Arc<dyn MomentSource> {
    Arc::new(m)
}

/// Derivative of `f` along the Liouville vector field `y^i d/dx^i + (F y)^i d/dy^i`,
/// by central differences with the velocity displacement pulled back to the
/// hyperboloid.
pub fn liouville_residual(
    f: &dyn Fn(&V4, &V4) -> f64,
    field: &FaradayField,
    x: &V4,
    y: &V4,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("h", "must be positive"));
    }
    let fy = field.mixed(x) * y;
    let yp = project(&(y + h * fy));
    let ym = project(&(y - h * fy));
    let xp = x + h * y;
    let xm = x - h * y;
    Ok((f(&xp, &yp) - f(&xm, &ym)) / (2.0 * h))
}

/// Density at `(x, y)` obtained by following the Lorentz flow back to lab
/// time `t0` and evaluating `f0` there.
pub fn transported_density<'a>(
    f0: &'a (dyn Fn(&V4, &V4) -> f64 + Sync),
    field: &'a FaradayField,
    t0: f64,
    cfg: &'a IntegratorConfig,
) -> impl Fn(&V4, &V4) -> f64 + 'a {
    move |x, y| {
        let s = sample_lab_times(&LorentzForce(field), &TrajectoryState::new(0.0, *x, *y), &[t0], cfg, cfg.renormalize, "transported_density");
        match s {
            Ok(v) => f0(&v[0].x, &v[0].y),
            Err(_) => f64::NAN,
        }
    }
}

/// Exponential `exp(tau A)` of a constant mixed field, used by closed-form checks.
pub fn flow_matrix(a: &M4, tau: f64) -> M4 {
    let m = a * tau;
    let n = m.amax();
    let k = if n > 0.5 { (n / 0.5).log2().ceil() as i32 } else { 0 };
    let ms = m / 2f64.powi(k);
    let mut term = M4::identity();
    let mut sum = M4::identity();
    for j in 1..30 {
        term = term * ms / j as f64;
        sum += term;
    }
    for _ in 0..k {
        sum = sum * sum;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connections::{AffineTable, AveragedLorentz, LorentzConnection, TildeConnection};
    use crate::distribution::{lift, moments, EnsembleSpec, VelocityLaw};
    use crate::fields::FieldPreset;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn st(y: V4) -> TrajectoryState {
        TrajectoryState::new(0.0, V4::zeros(), y)
    }

    fn max_dev(a: &TrajectoryRecord, b: &TrajectoryRecord) -> f64 {
        a.states
            .iter()
            .zip(&b.states)
            .map(|(p, q)| (p.x - q.x).amax().max((p.y - q.y).amax()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn free_particle_moves_straight() {
        let y = lift(&[0.3, 1.0, -0.2]);
        let r = push_lorentz(&FieldPreset::Zero.build(), &st(y), (0.0, 2.0), &IntegratorConfig::default()).unwrap();
        let last = r.last();
        assert_relative_eq!(last.s, 2.0);
        assert!((last.x - 2.0 * y).amax() < 1e-13);
        assert!((last.y - y).amax() < 1e-15);
        let zero = AffineTable::levi_civita_flat();
        let r = push_connection(&zero, &st(y), (0.0, 2.0), &IntegratorConfig::default()).unwrap();
        assert!((r.last().x - 2.0 * y).amax() < 1e-13);
    }

    #[test]
    fn hyperbolic_motion() {
        let f = FieldPreset::ConstantE { e: [0.5, 0.0, 0.0] }.build();
        let r = push_lorentz(&f, &st(V4::new(1.0, 0.0, 0.0, 0.0)), (0.0, 2.0), &IntegratorConfig::rk4(1e-3)).unwrap();
        let y = r.last().y;
        assert!((y[0] - 1f64.cosh()).abs() < 1e-8);
        assert!((y[1] - 1f64.sinh()).abs() < 1e-8);
        let lab = to_lab_time(&r, 0.05).unwrap();
        for s in &lab.states {
            let tau = (0.5 * s.s).asinh() / 0.5;
            assert!((s.y[0] - (0.5 * tau).cosh()).abs() < 1e-8);
        }
        let rest = push_lorentz(&FieldPreset::Zero.build(), &st(V4::new(1.0, 0.0, 0.0, 0.0)), (0.0, 1.0), &IntegratorConfig::default())
            .unwrap();
        let lab = to_lab_time(&rest, 0.1).unwrap();
        assert_eq!(lab.states.len(), 11);
        assert_relative_eq!(lab.states[7].s, 0.7, epsilon = 1e-14);
    }

    #[test]
    fn lab_time_of_uniform_motion_is_dilated() {
        let y = lift(&[0.0, 2.0, 0.0]);
        let r = push_lorentz(&FieldPreset::Zero.build(), &st(y), (0.0, 1.0), &IntegratorConfig::default()).unwrap();
        let lab = to_lab_time(&r, 0.25).unwrap();
        for s in &lab.states {
            assert_relative_eq!(s.x[2], s.s * 2.0 / 5f64.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_b_matches_exponential_flow() {
        let f = FieldPreset::ConstantB { b: [0.0, 0.0, 1.0] }.build();
        let y0 = lift(&[2.0, 0.0, 0.0]);
        let cfg = IntegratorConfig { renormalize: false, ..IntegratorConfig::rk4(1e-3) };
        let r = push_lorentz(&f, &st(y0), (0.0, 3.0), &cfg).unwrap();
        let exact = flow_matrix(&f.mixed(&V4::zeros()), 3.0) * y0;
        assert!((r.last().y - exact).amax() < 1e-10);
        assert!(r.max_drift < 1e-9 * 3.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let f = FieldPreset::ConstantB { b: [0.0, 0.0, 1.0] }.build();
        let y0 = lift(&[1.0, 0.0, 0.0]);
        let exact = flow_matrix(&f.mixed(&V4::zeros()), 2.0) * y0;
        let err = |h: f64| {
            let cfg = IntegratorConfig { renormalize: false, ..IntegratorConfig::rk4(h) };
            (push_lorentz(&f, &st(y0), (0.0, 2.0), &cfg).unwrap().last().y - exact).amax()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((14.0..=18.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rk45_agrees_with_rk4() {
        let f = FieldPreset::NormalQuadDipole { b0: 1.0, b1: 0.5 }.build();
        let init = TrajectoryState::new(0.0, V4::new(0.0, 0.1, 0.0, 0.05), lift(&[0.1, 3.0, 0.2]));
        let a = push_lorentz(&f, &init, (0.0, 2.0), &IntegratorConfig::rk4(1e-3)).unwrap();
        let cfg = IntegratorConfig { method: Method::Rk45, step: 1e-2, tol: 1e-12, ..Default::default() };
        let b = push_lorentz(&f, &init, (0.0, 2.0), &cfg).unwrap();
        assert!((a.last().x - b.last().x).amax() < 1e-8);
        assert!(b.steps < a.steps);
    }

    #[test]
    fn connection_geodesics_match_lorentz_push() {
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let init = st(lift(&[0.6, 0.0, 0.0]));
        let cfg = IntegratorConfig { renormalize: false, ..Default::default() };
        let a = push_lorentz(&f, &init, (0.0, 10.0), &cfg).unwrap();
        let b = push_connection(&LorentzConnection::new(f.clone()), &init, (0.0, 10.0), &cfg).unwrap();
        assert!(max_dev(&a, &b) < 1e-7);
        let c = push_connection(&TildeConnection::new(f.clone()), &init, (0.0, 10.0), &cfg).unwrap();
        assert!(max_dev(&a, &c) < 1e-7);
        let avg = AveragedLorentz::frozen(f.clone(), MomentSet::point(&init.y));
        let force = f.mixed(&init.x) * init.y;
        assert!((Geodesic(&avg).accel(&init.x, &init.y).unwrap() - force).amax() < 1e-14);
    }

    #[test]
    fn time_reversal() {
        for preset in FieldPreset::catalog() {
            let f = preset.build();
            let init = TrajectoryState::new(0.0, V4::new(0.0, 0.1, 0.2, 0.3), lift(&[0.2, 1.0, -0.1]));
            let cfg = IntegratorConfig::default();
            let fwd = push_lorentz(&f, &init, (0.0, 1.0), &cfg).unwrap();
            let back = push_lorentz(&f, fwd.last(), (1.0, 0.0), &cfg).unwrap();
            assert!((back.last().x - init.x).amax() < 1e-9);
            assert!((back.last().y - init.y).amax() < 1e-9);
            assert_eq!(back.last().s, 0.0);
        }
    }

    #[test]
    fn constraint_drift_without_projection() {
        for preset in FieldPreset::catalog() {
            let f = preset.build();
            let cfg = IntegratorConfig { renormalize: false, ..Default::default() };
            let init = TrajectoryState::new(0.0, V4::new(0.0, 0.1, 0.2, 0.3), lift(&[0.2, 1.0, -0.1]));
            let r = push_lorentz(&f, &init, (0.0, 2.0), &cfg).unwrap();
            assert!(r.max_drift < 2e-9, "{}: {}", preset.name(), r.max_drift);
        }
    }

    #[test]
    fn rejects_off_shell_and_bad_config() {
        let f = FieldPreset::Zero.build();
        assert!(push_lorentz(&f, &st(V4::new(1.0, 0.5, 0.0, 0.0)), (0.0, 1.0), &IntegratorConfig::default()).is_err());
        assert!(push_lorentz(&f, &st(lift(&[0.0; 3])), (0.0, 1.0), &IntegratorConfig::rk4(0.0)).is_err());
        let blow = |_: &V4, y: &V4| -> Result<V4> { Ok(y * 1e300) };
        assert!(matches!(
            push(&blow, &st(lift(&[0.0; 3])), (0.0, 1.0), &IntegratorConfig::default(), false, "t"),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn lab_time_slices_hit_requested_times() {
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let init = st(lift(&[0.0, 3.0, 0.0]));
        let times = lab_grid(0.0, 5.0, 0.5);
        let s = sample_lab_times(&LorentzForce(&f), &init, &times, &IntegratorConfig::default(), true, "t").unwrap();
        let rec = push_lorentz(&f, &init, (0.0, 2.0), &IntegratorConfig::default()).unwrap();
        let lab = to_lab_time(&rec, 0.5).unwrap();
        for (a, b) in s.iter().zip(&lab.states) {
            assert_eq!(a.x[0], b.s);
            assert!((a.x - b.x).amax() < 1e-11);
            assert!((a.y - b.y).amax() < 1e-11);
        }
    }

    fn cap(r0: f64, r: f64, n: usize) -> HyperboloidEnsemble {
        EnsembleSpec::new(VelocityLaw::RapidityCap { r_cap: r }, r0, n, 5).generate().unwrap()
    }

    #[test]
    fn ensemble_transport_basics() {
        let ens = cap(2.0, 0.1, 64);
        let zero = FieldPreset::Zero.build();
        let times = [0.0, 1.0, 2.0];
        let s = transport_ensemble(&zero, &ens, &times, &IntegratorConfig::default()).unwrap();
        let m0 = moments(&ens).unwrap();
        for sl in &s.slices {
            assert!((sl.moments().unwrap().mean - m0.mean).amax() < 1e-13);
            for (p, q) in sl.samples.iter().zip(&ens.samples) {
                assert_eq!(p.w, q.w);
            }
        }
        let avg = AveragedLorentz::frozen(zero.clone(), m0);
        let s2 = transport_ensemble_averaged(&avg, &ens, &times, &IntegratorConfig::default()).unwrap();
        assert!((s2.slices[2].samples[7].x - s.slices[2].samples[7].x).amax() < 1e-12);

        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let y0 = lift(&[0.0, 2.0, 0.1]);
        let d = HyperboloidEnsemble::delta(V4::zeros(), y0).unwrap();
        let s = transport_ensemble(&f, &d, &times, &IntegratorConfig::default()).unwrap();
        let single = sample_lab_times(&LorentzForce(&f), &st(y0), &times, &IntegratorConfig::default(), true, "t").unwrap();
        for (sl, one) in s.slices.iter().zip(&single) {
            assert_eq!(sl.samples[0].x, one.x);
        }
        let p = co_transport(&f, &d, &[st(y0)], &times, &IntegratorConfig::default(), MomentMode::Transported).unwrap();
        assert!((p.tracers[2][0].x - s.slices[2].samples[0].x).amax() < 1e-9);
        assert!((p.lorentz.slices[2].samples[0].x - s.slices[2].samples[0].x).amax() < 1e-9);
    }

    #[test]
    fn ensemble_stays_on_shell() {
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let ens = cap(1.0, 0.1, 32);
        let s = transport_ensemble(&f, &ens, &[50.0], &IntegratorConfig::default()).unwrap();
        let m = Metric::minkowski();
        let drift = s.slices[0].samples.iter().map(|p| (m.norm_sq(&p.y) - 1.0).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-8);
    }

    #[test]
    fn failing_sample_is_reported_by_index() {
        let ens = cap(1.0, 0.1, 8);
        let f = |x: &V4, _y: &V4| -> Result<V4> {
            if x[0] > 0.5 {
                Err(Error::invalid("x", "outside"))
            } else {
                Ok(V4::zeros())
            }
        };
        let e = transport_with(&f, &ens, &[1.0], &IntegratorConfig::default(), false, "t").unwrap_err();
        assert!(matches!(e, Error::Sample { index: 0, .. }));
    }

    #[test]
    fn slice_moments_interpolate_transported_moments() {
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let ens = cap(2.0, 0.2, 200);
        let cfg = IntegratorConfig::default();
        let sm = SliceMoments::lorentz(&f, &ens, 2.0, 0.05, &cfg).unwrap();
        let probe = transport_ensemble(&f, &ens, &[0.737], &cfg).unwrap();
        let direct = probe.slices[0].moments().unwrap();
        let interp = sm.at_time(0.737).unwrap();
        assert!((direct.mean - interp.mean).amax() < 1e-9);
        assert!((direct.third[1] - interp.third[1]).amax() < 1e-6 * direct.third[1].amax());
        let h = 1e-4;
        let fd = (sm.at_time(0.9 + h).unwrap().mean - sm.at_time(0.9 - h).unwrap().mean) / (2.0 * h);
        assert!((fd - sm.rate_at_time(0.9).unwrap().mean).amax() < 1e-6);
        assert!(sm.at_time(10.0).is_err());
    }

    #[test]
    fn liouville_examples() {
        let f = FieldPreset::ConstantE { e: [0.3, -0.2, 0.1] }.build();
        let x = V4::new(0.0, 0.1, 0.2, 0.3);
        let y = lift(&[0.5, 0.4, -0.6]);
        let one = |_: &V4, _: &V4| 1.0;
        assert_eq!(liouville_residual(&one, &f, &x, &y, 1e-3).unwrap(), 0.0);
        let g = |_: &V4, y: &V4| y[0] * y[0];
        let r = liouville_residual(&g, &f, &x, &y, 1e-4).unwrap();
        let expect = 2.0 * y[0] * (0.3 * y[1] - 0.2 * y[2] + 0.1 * y[3]);
        assert!((r - expect).abs() < 1e-7, "{r} vs {expect}");
        let zero = FieldPreset::Zero.build();
        assert!(liouville_residual(&g, &zero, &x, &y, 1e-3).unwrap().abs() < 1e-12);
    }

    #[test]
    fn transported_density_is_invariant() {
        let f = FieldPreset::NormalQuadDipole { b0: 1.0, b1: 0.5 }.build();
        let f0 = |x: &V4, y: &V4| (-(x[1] * x[1] + x[3] * x[3]) - (y[1] * y[1] + y[3] * y[3])).exp();
        let cfg = IntegratorConfig::default();
        let ft = transported_density(&f0, &f, 0.0, &cfg);
        let x = V4::new(0.8, 0.2, 0.5, -0.1);
        let y = lift(&[0.3, 1.0, -0.2]);
        let r = liouville_residual(&ft, &f, &x, &y, 1e-3).unwrap();
        assert!(r.abs() < 1e-4, "{r}");
        assert!(liouville_residual(&f0, &f, &x, &y, 1e-3).unwrap().abs() > 1e-3);
    }

    #[test]
    fn paired_transport_of_delta_coincides() {
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let y0 = lift(&[0.0, 10.0, 0.0]);
        let d = HyperboloidEnsemble::delta(V4::zeros(), y0).unwrap();
        let times = lab_grid(0.0, 20.0, 1.0);
        let p = co_transport(&f, &d, &[st(y0)], &times, &IntegratorConfig::rk4(1e-4), MomentMode::Transported).unwrap();
        for (sl, tr) in p.lorentz.slices.iter().zip(&p.tracers) {
            assert!((sl.samples[0].x - tr[0].x).amax() < 1e-9, "{}", (sl.samples[0].x - tr[0].x).amax());
        }
    }

    #[test]
    fn paired_frozen_matches_affine_push() {
        let f = FieldPreset::NormalQuadDipole { b0: 1.0, b1: 0.3 }.build();
        let ens = cap(1.5, 0.2, 50);
        let m = moments(&ens).unwrap();
        let init = st(ens.samples[3].y);
        let times = [0.5, 1.0, 2.0];
        let p = co_transport(&f, &ens, &[init], &times, &IntegratorConfig::default(), MomentMode::Frozen).unwrap();
        let avg = AveragedLorentz::frozen(f.clone(), m);
        let direct = sample_lab_times(&Geodesic(&avg), &init, &times, &IntegratorConfig::default(), false, "t").unwrap();
        for (a, b) in p.tracers.iter().zip(&direct) {
            assert!((a[0].x - b.x).amax() < 1e-10);
            assert!((a[0].y - b.y).amax() < 1e-10);
            assert!((a[0].tau - b.tau).abs() < 1e-10);
        }
        let lz = transport_ensemble(&f, &ens, &times, &IntegratorConfig::default()).unwrap();
        assert!((lz.slices[2].samples[9].x - p.lorentz.slices[2].samples[9].x).amax() < 1e-10);
    }

    #[test]
    fn chunked_moments_are_thread_independent() {
        let ens = cap(1.0, 0.3, 3000);
        let ys: Vec<V4> = ens.samples.iter().map(|s| s.y).collect();
        let ws = vec![1.0; ys.len()];
        let a = chunked_moments(&ys, &ws).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| chunked_moments(&ys, &ws).unwrap());
        assert_eq!(a, b);
        let direct = moments(&ens).unwrap();
        assert!((a.mean - direct.mean).amax() < 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn weights_preserved(seed in 0u64..100) {
            let mut spec = EnsembleSpec::new(VelocityLaw::RapidityCap { r_cap: 0.1 }, 1.0, 16, seed);
            spec.position_sigma = 0.1;
            let mut ens = spec.generate().unwrap();
            for (i, s) in ens.samples.iter_mut().enumerate() { s.w = 1.0 + i as f64; }
            let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
            let s = transport_ensemble(&f, &ens, &[0.5], &IntegratorConfig::rk4(1e-2)).unwrap();
            for (p, q) in s.slices[0].samples.iter().zip(&ens.samples) {
                prop_assert_eq!(p.w, q.w);
            }
        }
    }
}
