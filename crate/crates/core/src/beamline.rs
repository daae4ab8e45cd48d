//! Linear beam optics from the Jacobi equation of an affine connection:
//! deviation transport along a reference orbit, Hill-type preset systems,
//! principal solutions, Green functions and the averaged off-set.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connections::{d_coeffs, AffineConnection, Coeffs};
use crate::distribution::{fmt_f64, HyperboloidEnsemble, MomentSet};
use crate::dynamics::{co_transport, hermite, lab_grid, IntegratorConfig, MomentMode, TrajectoryRecord, TrajectoryState};
use crate::fields::FaradayField;
use crate::geometry::Metric;
use crate::{Error, Result, V4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobiState {
    pub tau: f64,
    pub xi: V4,
    pub xip: V4,
}

impl JacobiState {
    pub fn new(tau: f64, xi: V4, xip: V4) -> Self {
        JacobiState { tau, xi, xip }
    }
}

/// Position and velocity of a recorded orbit at any covered proper time.
pub fn reference_at(rec: &TrajectoryRecord, tau: f64) -> Result<(V4, V4)> {
    let st = &rec.states;
    let (first, last) = (st[0].s, st[st.len() - 1].s);
    let (lo, hi) = (first.min(last), first.max(last));
    let slack = 1e-12 * (hi - lo).max(1.0);
    if tau < lo - slack || tau > hi + slack || st.len() < 2 {
        return Err(Error::OutOfRange { what: "reference proper time", value: tau, lo, hi });
    }
    let up = last >= first;
    let i = st.partition_point(|s| if up { s.s <= tau } else { s.s >= tau }).clamp(1, st.len() - 1);
    let (a, b) = (&st[i - 1], &st[i]);
    let h = b.s - a.s;
    let t = if h == 0.0 { 0.0 } else { (tau - a.s) / h };
    let x = hermite(&a.x, &a.y, &b.x, &b.y, h, t);
    let y = hermite(&a.y, &rec.accels[i - 1], &b.y, &rec.accels[i], h, t);
    Ok((x, y))
}

/// `xi'' = -[2 Gamma(xi', X') + (xi . d Gamma)(X', X')]` along the reference,
/// with `d Gamma` by central differences of step `h`.
///
/// In Cartesian lab coordinates the flat part of the coefficients vanishes,
/// so the inertial terms are whatever non-flat part `coeffs` carries.
pub fn jacobi_rhs(coeffs: &dyn AffineConnection, reference: &TrajectoryRecord, state: &JacobiState, h: f64) -> Result<V4> {
    let (x, xd) = reference_at(reference, state.tau)?;
    jacobi_rhs_at(coeffs, &x, &xd, state, h)
}

fn jacobi_rhs_at(coeffs: &dyn AffineConnection, x: &V4, xd: &V4, state: &JacobiState, h: f64) -> Result<V4> {
    let g = coeffs.coeffs_at(x)?;
    let mut dg = Coeffs::zeros();
    for l in 0..4 {
        if state.xi[l] != 0.0 {
            dg = dg.add(&d_coeffs(coeffs, x, l, h)?.scale(state.xi[l]));
        }
    }
    Ok(-(g.contract(&state.xip, xd) + g.contract(xd, &state.xip) + dg.contract(xd, xd)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobiRecord {
    pub states: Vec<JacobiState>,
}

impl JacobiRecord {
    pub fn last(&self) -> &JacobiState {
        &self.states[self.states.len() - 1]
    }

    /// Table `tau, xi0..xi3, xip0..xip3`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["tau", "xi0", "xi1", "xi2", "xi3", "xip0", "xip1", "xip2", "xip3"])?;
        for s in &self.states {
            let mut rec = vec![fmt_f64(s.tau)];
            rec.extend(s.xi.iter().chain(s.xip.iter()).map(|v| fmt_f64(*v)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// RK4 on `(xi, xi')` over `span` with the step of `cfg`.
pub fn integrate_jacobi(
    coeffs: &dyn AffineConnection,
    reference: &TrajectoryRecord,
    init: &JacobiState,
    span: (f64, f64),
    cfg: &IntegratorConfig,
    h: f64,
) -> Result<JacobiRecord> {
    cfg.validate()?;
    if !(h > 0.0) {
        return Err(Error::invalid("h", "must be positive"));
    }
    reference_at(reference, span.0)?;
    reference_at(reference, span.1)?;
    let n = ((span.1 - span.0).abs() / cfg.step).ceil().max(1.0) as usize;
    let dt = (span.1 - span.0) / n as f64;
    let mut s = JacobiState { tau: span.0, ..*init };
    let mut states = vec![s];
    let f = |st: &JacobiState| -> Result<(V4, V4)> { Ok((st.xip, jacobi_rhs(coeffs, reference, st, h)?)) };
    for k in 0..n {
        let (a1, b1) = f(&s)?;
        let (a2, b2) = f(&JacobiState::new(s.tau + 0.5 * dt, s.xi + 0.5 * dt * a1, s.xip + 0.5 * dt * b1))?;
        let (a3, b3) = f(&JacobiState::new(s.tau + 0.5 * dt, s.xi + 0.5 * dt * a2, s.xip + 0.5 * dt * b2))?;
        let (a4, b4) = f(&JacobiState::new(s.tau + dt, s.xi + dt * a3, s.xip + dt * b3))?;
        s = JacobiState::new(
            span.0 + (k + 1) as f64 * dt,
            s.xi + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
            s.xip + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4),
        );
        if !(s.xi.iter().chain(s.xip.iter()).all(|v| v.is_finite())) {
            return Err(Error::NonFinite { module: "integrate_jacobi", step: k + 1 });
        }
        states.push(s);
    }
    Ok(JacobiRecord { states })
}

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `u'' + D(tau) u' + K(tau) u = p(tau)`.
#[derive(Clone)]
pub struct HillSystem {
    pub k: ScalarFn,
    pub d: ScalarFn,
    pub p: ScalarFn,
    pub label: String,
}

impl std::fmt::Debug for HillSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HillSystem").field("label", &self.label).finish()
    }
}

impl HillSystem {
    pub fn new(label: impl Into<String>, k: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        HillSystem { k: Arc::new(k), d: Arc::new(|_| 0.0), p: Arc::new(|_| 0.0), label: label.into() }
    }

    pub fn constant(label: impl Into<String>, k: f64) -> Self {
        Self::new(label, move |_| k)
    }

    pub fn with_damping(mut self, d: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.d = Arc::new(d);
        self
    }

    pub fn with_perturbation(mut self, p: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.p = Arc::new(p);
        self
    }
}

/// Linear optics presets for the deviation components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HillPreset {
    /// Bending-plane dipole; `conventional` flips the printed sign to weak focusing.
    Dipole {
        rho: f64,
        #[serde(default)]
        conventional: bool,
    },
    SkewDipole {
        rho: f64,
    },
    QuadDipole {
        b1: f64,
        rho: f64,
    },
    Quad45Dipole {
        b0: f64,
        b1: f64,
        rho: f64,
    },
    LongitudinalE {
        e2: f64,
    },
    Rf {
        gamma: f64,
        e2_0: f64,
    },
}

impl HillPreset {
    pub fn name(&self) -> &'static str {
        match self {
            HillPreset::Dipole { .. } => "dipole",
            HillPreset::SkewDipole { .. } => "skew-dipole",
            HillPreset::QuadDipole { .. } => "quad-dipole",
            HillPreset::Quad45Dipole { .. } => "quad45-dipole",
            HillPreset::LongitudinalE { .. } => "longitudinal-e",
            HillPreset::Rf { .. } => "rf",
        }
    }

    /// Systems per deviation component, keyed by component index.
    pub fn systems(&self) -> Result<Vec<(usize, HillSystem)>> {
        let pos = |name: &'static str, v: f64| -> Result<f64> {
            if v.is_finite() && v != 0.0 {
                Ok(v)
            } else {
                Err(Error::Invalid { name, reason: format!("must be finite and nonzero, got {v}") })
            }
        };
        Ok(match *self {
            HillPreset::Dipole { rho, conventional } => {
                let r = pos("rho", rho)?;
                let k = if conventional { 1.0 / (r * r) } else { -1.0 / (r * r) };
                vec![(1, HillSystem::constant("dipole xi1", k)), (3, HillSystem::constant("dipole xi3", 0.0))]
            }
            HillPreset::SkewDipole { rho } => {
                let r = pos("rho", rho)?;
                vec![(1, HillSystem::constant("skew dipole xi1", -1.0 / (r * r))), (3, HillSystem::constant("skew dipole xi3", 0.0))]
            }
            HillPreset::QuadDipole { b1, rho } => {
                let r = pos("rho", rho)?;
                vec![(1, HillSystem::constant("quad xi1", -b1 + 1.0 / (r * r))), (3, HillSystem::constant("quad xi3", b1))]
            }
            HillPreset::Quad45Dipole { b0, b1, rho } => {
                let r = pos("rho", rho)?;
                vec![(1, HillSystem::constant("quad45 xi1", b1 + 1.0 / (r * r))), (3, HillSystem::constant("quad45 xi3", -b0))]
            }
            HillPreset::LongitudinalE { e2 } => {
                vec![(2, HillSystem::constant("longitudinal xi2", 0.0).with_damping(move |_| e2))]
            }
            HillPreset::Rf { gamma, e2_0 } => vec![(2, HillSystem::constant("rf xi2", -2.0 * gamma * e2_0))],
        })
    }
}

/// Principal solutions `C`, `S` and their derivatives on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalSolutions {
    pub tau: Vec<f64>,
    pub c: Vec<f64>,
    pub cp: Vec<f64>,
    pub s: Vec<f64>,
    pub sp: Vec<f64>,
}

impl PrincipalSolutions {
    pub fn wronskian(&self, i: usize) -> f64 {
        self.c[i] * self.sp[i] - self.cp[i] * self.s[i]
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (lo, hi) = (self.tau[0], self.tau[self.tau.len() - 1]);
        if t < lo - 1e-12 || t > hi + 1e-12 {
            return Err(Error::OutOfRange { what: "proper time", value: t, lo, hi });
        }
        let h = self.tau[1] - self.tau[0];
        let i = (((t - lo) / h).floor() as usize).min(self.tau.len() - 2);
        Ok((i, (t - self.tau[i]) / h))
    }

    /// `(C, S)` at any covered time by quintic-accurate Hermite interpolation
    /// of values and slopes.
    pub fn at(&self, t: f64) -> Result<(f64, f64)> {
        let (i, f) = self.locate(t)?;
        let h = self.tau[1] - self.tau[0];
        let herm = |p0: f64, v0: f64, p1: f64, v1: f64| {
            let (f2, f3) = (f * f, f * f * f);
            (2.0 * f3 - 3.0 * f2 + 1.0) * p0 + (f3 - 2.0 * f2 + f) * h * v0 + (-2.0 * f3 + 3.0 * f2) * p1 + (f3 - f2) * h * v1
        };
        Ok((herm(self.c[i], self.cp[i], self.c[i + 1], self.cp[i + 1]), herm(self.s[i], self.sp[i], self.s[i + 1], self.sp[i + 1])))
    }
}

/// Integrate `u'' + D u' + K u = 0` from `C = 1, C' = 0` and `S = 0, S' = 1`.
pub fn principal_solutions(sys: &HillSystem, span: (f64, f64), cfg: &IntegratorConfig) -> Result<PrincipalSolutions> {
    cfg.validate()?;
    if !(span.1 > span.0) {
        return Err(Error::invalid("span", "must be increasing"));
    }
    let n = ((span.1 - span.0) / cfg.step).ceil().max(2.0) as usize;
    let h = (span.1 - span.0) / n as f64;
    let rhs = |t: f64, u: [f64; 4]| -> [f64; 4] {
        let (k, d) = ((sys.k)(t), (sys.d)(t));
        [u[1], -k * u[0] - d * u[1], u[3], -k * u[2] - d * u[3]]
    };
    let mut u = [1.0, 0.0, 0.0, 1.0];
    let mut out = PrincipalSolutions { tau: vec![span.0], c: vec![1.0], cp: vec![0.0], s: vec![0.0], sp: vec![1.0] };
    let add = |a: [f64; 4], b: [f64; 4], s: f64| -> [f64; 4] { std::array::from_fn(|i| a[i] + s * b[i]) };
    for k in 0..n {
        let t = span.0 + k as f64 * h;
        let k1 = rhs(t, u);
        let k2 = rhs(t + 0.5 * h, add(u, k1, 0.5 * h));
        let k3 = rhs(t + 0.5 * h, add(u, k2, 0.5 * h));
        let k4 = rhs(t + h, add(u, k3, h));
        u = std::array::from_fn(|i| u[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { module: "principal_solutions", step: k + 1 });
        }
        out.tau.push(span.0 + (k + 1) as f64 * h);
        out.c.push(u[0]);
        out.cp.push(u[1]);
        out.s.push(u[2]);
        out.sp.push(u[3]);
    }
    Ok(out)
}

/// `G(tau, tau~) = S(tau) C(tau~) - C(tau) S(tau~)`.
pub fn green(ps: &PrincipalSolutions, tau: f64, tau_t: f64) -> Result<f64> {
    let (c, s) = ps.at(tau)?;
    let (ct, st) = ps.at(tau_t)?;
    Ok(s * ct - c * st)
}

/// Running integral `int_{x_0}^{x_i} f` on a possibly uneven grid. Each
/// interval integrates the cubic through its four nearest nodes, so the
/// rule is exact for cubics and its error varies smoothly along the grid.
pub fn cumulative_integral(x: &[f64], f: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    if n < 4 {
        for j in 0..n - 1 {
            out[j + 1] = out[j] + 0.5 * (f[j] + f[j + 1]) * (x[j + 1] - x[j]);
        }
        if n == 3 {
            let nodes = [x[0], x[1], x[2]];
            let vals = [f[0], f[1], f[2]];
            out[1] = lagrange_integral(&nodes, &vals, x[0], x[1]);
            out[2] = lagrange_integral(&nodes, &vals, x[0], x[2]);
        }
        return out;
    }
    for j in 0..n - 1 {
        let s = j.saturating_sub(1).min(n - 4);
        out[j + 1] = out[j] + lagrange_integral(&x[s..s + 4], &f[s..s + 4], x[j], x[j + 1]);
    }
    out
}

/// Integral over `[p, q]` of the interpolant through the nodes, by
/// Gauss-Legendre quadrature that is exact for its degree.
fn lagrange_integral(nodes: &[f64], vals: &[f64], p: f64, q: f64) -> f64 {
    let interp = |t: f64| -> f64 {
        (0..nodes.len())
            .map(|i| {
                let li: f64 = (0..nodes.len()).filter(|&j| j != i).map(|j| (t - nodes[j]) / (nodes[i] - nodes[j])).product();
                vals[i] * li
            })
            .sum()
    };
    let (m, r) = (0.5 * (p + q), 0.5 * (q - p));
    let g = 1.0 / 3f64.sqrt();
    r * (interp(m - r * g) + interp(m + r * g))
}

/// `P(tau) = int_0^tau p(s) G(tau, s) ds` on the grid of the principal
/// solutions, with its derivative.
pub fn particular_solution(p: &dyn Fn(f64) -> f64, ps: &PrincipalSolutions) -> (Vec<f64>, Vec<f64>) {
    let pv: Vec<f64> = ps.tau.iter().map(|t| p(*t)).collect();
    let pc: Vec<f64> = pv.iter().zip(&ps.c).map(|(a, b)| a * b).collect();
    let psv: Vec<f64> = pv.iter().zip(&ps.s).map(|(a, b)| a * b).collect();
    let ic = cumulative_integral(&ps.tau, &pc);
    let is = cumulative_integral(&ps.tau, &psv);
    let val = (0..ps.tau.len()).map(|i| ps.s[i] * ic[i] - ps.c[i] * is[i]).collect();
    let der = (0..ps.tau.len()).map(|i| ps.sp[i] * ic[i] - ps.cp[i] * is[i]).collect();
    (val, der)
}

/// Largest `|P'' + D P' + K P - p|` over interior grid points, with `P''` by
/// five-point differences.
pub fn substitution_residual(sys: &HillSystem, ps: &PrincipalSolutions, val: &[f64], der: &[f64]) -> f64 {
    let h = ps.tau[1] - ps.tau[0];
    (2..ps.tau.len().saturating_sub(2))
        .map(|i| {
            let t = ps.tau[i];
            let pp = (-val[i + 2] + 16.0 * val[i + 1] - 30.0 * val[i] + 16.0 * val[i - 1] - val[i - 2]) / (12.0 * h * h);
            (pp + (sys.d)(t) * der[i] + (sys.k)(t) * val[i] - (sys.p)(t)).abs()
        })
        .fold(0.0, f64::max)
}

/// Quantities along the reference orbit that enter the off-set integral.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetInputs {
    pub tau: Vec<f64>,
    pub x: Vec<V4>,
    pub xdot: Vec<V4>,
    pub moments: Vec<MomentSet>,
    /// `<y> - X'`.
    pub eps: Vec<V4>,
    /// Mean deviation of the ensemble from the reference at equal lab time.
    pub xi_mean: Vec<V4>,
}

impl OffsetInputs {
    /// Transport `ens` with the Lorentz flow and a reference orbit with the
    /// averaged flow from the centroid along the normalized mean velocity.
    pub fn from_transport(field: &FaradayField, ens: &HyperboloidEnsemble, t1: f64, dt: f64, cfg: &IntegratorConfig) -> Result<Self> {
        let m0 = crate::distribution::moments(ens)?;
        let n = Metric::minkowski().norm_sq(&m0.mean);
        if !(n > 0.0) {
            return Err(Error::NotTimelike(n));
        }
        let wsum: f64 = ens.samples.iter().map(|s| s.w).sum();
        let c0 = ens.samples.iter().fold(V4::zeros(), |a, s| a + s.w * s.x) / wsum;
        let start = TrajectoryState::new(0.0, c0, m0.mean / n.sqrt());
        let t0 = c0[0];
        let pair = co_transport(field, ens, &[start], &lab_grid(t0, t1, dt), cfg, MomentMode::Transported)?;
        let mut out = OffsetInputs { tau: vec![], x: vec![], xdot: vec![], moments: vec![], eps: vec![], xi_mean: vec![] };
        for ((sl, tr), m) in pair.lorentz.slices.iter().zip(&pair.tracers).zip(&pair.moments) {
            let r = &tr[0];
            let c = sl.samples.iter().fold(V4::zeros(), |a, s| a + s.w * s.x) / wsum;
            out.tau.push(r.tau);
            out.x.push(r.x);
            out.xdot.push(r.y);
            out.eps.push(m.mean - r.y);
            out.xi_mean.push(c - r.x);
            out.moments.push(m.clone());
        }
        Ok(out)
    }

    /// Replace the deviation `eps` by a user supplied law in `tau`.
    pub fn with_eps(mut self, eps: impl Fn(f64) -> V4) -> Self {
        self.eps = self.tau.iter().map(|t| eps(*t)).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetMode {
    /// Includes the `<xi> . d` term.
    Full,
    /// Drops the derivative term for slowly varying perturbations.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetReport {
    pub tau: Vec<f64>,
    pub off1: Vec<f64>,
    pub off3: Vec<f64>,
    pub mode: OffsetMode,
}

impl OffsetReport {
    pub fn max_abs(&self) -> f64 {
        self.off1.iter().chain(&self.off3).fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Table `tau, off1, off3`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["tau", "off1", "off3"])?;
        for i in 0..self.tau.len() {
            wr.write_record([fmt_f64(self.tau[i]), fmt_f64(self.off1[i]), fmt_f64(self.off3[i])])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Averaged off-set in the Born approximation, integrated in proper time.
///
/// Integrand, for `i` in 1 and 3, with `Phi` the connection field matrix:
/// `(Phi eps)^i eta(X', eps) + (Phi X')^i eta(eps, eps)
///  + Phi^i_m (<y^m> eta(X', X') - <y^m y_j y_k> X'^j X'^k)`
/// plus, in full mode, `<xi>^l` times the `x^l` derivative of the last term.
pub fn averaged_offset(field: &FaradayField, inp: &OffsetInputs, mode: OffsetMode, h: f64) -> Result<OffsetReport> {
    let n = inp.tau.len();
    if n < 2 || [inp.x.len(), inp.xdot.len(), inp.moments.len(), inp.eps.len(), inp.xi_mean.len()].iter().any(|&l| l != n) {
        return Err(Error::invalid("offset inputs", "need at least two aligned samples"));
    }
    if !(h > 0.0) {
        return Err(Error::invalid("h", "must be positive"));
    }
    let metric = Metric::minkowski();
    let mut i1 = Vec::with_capacity(n);
    let mut i3 = Vec::with_capacity(n);
    for k in 0..n {
        let (x, xd, m, e) = (&inp.x[k], &inp.xdot[k], &inp.moments[k], &inp.eps[k]);
        let (_, fm) = field.eval(x)?;
        let phi = -fm;
        let xl = metric.lower(xd);
        let collective = m.mean * metric.dot(xd, xd) - m.third_contract(&xl, &xl);
        let mut v = phi * e * metric.dot(xd, e) + phi * xd * metric.dot(e, e) + phi * collective;
        if mode == OffsetMode::Full {
            let xi = &inp.xi_mean[k];
            for l in 0..4 {
                if xi[l] != 0.0 {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[l] += h;
                    xm[l] -= h;
                    let dphi = (field.mixed(&xm) - field.mixed(&xp)) / (2.0 * h);
                    v += xi[l] * (dphi * collective);
                }
            }
        }
        i1.push(v[1]);
        i3.push(v[3]);
    }
    Ok(OffsetReport { tau: inp.tau.clone(), off1: cumulative_integral(&inp.tau, &i1), off3: cumulative_integral(&inp.tau, &i3), mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connections::{AffineTable, AveragedLorentz, Connection};
    use crate::distribution::{lift, moments, EnsembleSpec, VelocityLaw};
    use crate::dynamics::push_connection;
    use crate::fields::FieldPreset;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cap_ens(alpha: f64, n: usize) -> HyperboloidEnsemble {
        let r0 = 10f64.acosh();
        let r_cap = (0.5 * alpha / (2.0 * r0).cosh().sqrt()).asinh();
        let mut s = EnsembleSpec::new(VelocityLaw::RapidityCap { r_cap }, r0, n, 5);
        s.antithetic = true;
        s.generate().unwrap()
    }

    fn reference(conn: &dyn Connection, y: V4, span: f64) -> TrajectoryRecord {
        push_connection(conn, &TrajectoryState::new(0.0, V4::zeros(), y), (0.0, span), &IntegratorConfig::default()).unwrap()
    }

    #[test]
    fn flat_jacobi_fields_are_affine() {
        let flat = AffineTable::levi_civita_flat();
        let r = reference(&flat, lift(&[0.2, 1.0, 0.0]), 2.0);
        let init = JacobiState::new(0.0, V4::new(0.0, 1e-3, 0.0, 2e-3), V4::new(0.0, 1e-4, -1e-4, 0.0));
        let rec = integrate_jacobi(&flat, &r, &init, (0.0, 2.0), &IntegratorConfig::default(), 1e-4).unwrap();
        for s in &rec.states {
            assert!((s.xi - (init.xi + s.tau * init.xip)).amax() < 1e-15);
        }
        let c = AffineTable::constant("const", crate::connections::Coeffs([crate::M4::identity(); 4]));
        let st = JacobiState::new(0.5, V4::new(0.1, 0.2, 0.3, 0.4), V4::zeros());
        assert_eq!(jacobi_rhs(&c, &r, &st, 1e-4).unwrap(), V4::zeros());
    }

    #[test]
    fn dipole_rhs_matches_hand_linearization() {
        // point moments at X' give xi'' = -Phi xi' - Phi X' eta(X', xi')
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let y = lift(&[0.0, 3.0, 0.0]);
        let conn = AveragedLorentz::frozen(f.clone(), MomentSet::point(&y));
        let r = reference(&conn, y, 1e-9);
        let phi = -f.mixed(&V4::zeros());
        let eta = Metric::minkowski();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let xi = V4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let xip = V4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let got = jacobi_rhs(&conn, &r, &JacobiState::new(0.0, xi, xip), 1e-4).unwrap();
            let want = -(phi * xip) - phi * y * eta.dot(&y, &xip);
            assert!((got - want).amax() < 1e-12 * (1.0 + want.amax()), "{got} {want}");
        }
    }

    #[test]
    fn jacobi_zero_and_superposition() {
        let f = FieldPreset::NormalQuadDipole { b0: 1.0, b1: 0.5 }.build();
        let ens = cap_ens(0.05, 200);
        let conn = AveragedLorentz::frozen(f, moments(&ens).unwrap());
        let r = reference(&conn, lift(&[0.0, 3.0, 0.0]), 2.0);
        let cfg = IntegratorConfig::default();
        let zero = integrate_jacobi(&conn, &r, &JacobiState::new(0.0, V4::zeros(), V4::zeros()), (0.0, 2.0), &cfg, 1e-4).unwrap();
        assert!(zero.states.iter().all(|s| s.xi == V4::zeros() && s.xip == V4::zeros()));
        let s1 = JacobiState::new(0.0, V4::new(0.0, 1e-3, 0.0, 0.0), V4::new(0.0, 0.0, 0.0, 1e-3));
        let s2 = JacobiState::new(0.0, V4::new(0.0, 0.0, 0.0, -2e-3), V4::new(0.0, 5e-4, 0.0, 0.0));
        let (a, b) = (2.0, -0.7);
        let sc = JacobiState::new(0.0, a * s1.xi + b * s2.xi, a * s1.xip + b * s2.xip);
        let r1 = integrate_jacobi(&conn, &r, &s1, (0.0, 2.0), &cfg, 1e-4).unwrap();
        let r2 = integrate_jacobi(&conn, &r, &s2, (0.0, 2.0), &cfg, 1e-4).unwrap();
        let rc = integrate_jacobi(&conn, &r, &sc, (0.0, 2.0), &cfg, 1e-4).unwrap();
        for ((p, q), c) in r1.states.iter().zip(&r2.states).zip(&rc.states) {
            assert!((a * p.xi + b * q.xi - c.xi).amax() < 1e-9);
        }
    }

    #[test]
    fn jacobi_matches_geodesic_variation() {
        let f = FieldPreset::NormalQuadDipole { b0: 1.0, b1: 0.5 }.build();
        let conn = AveragedLorentz::frozen(f, moments(&cap_ens(0.05, 200)).unwrap());
        let y = lift(&[0.0, 3.0, 0.0]);
        let span = 2.0;
        let r = reference(&conn, y, span);
        let xi0 = V4::new(0.0, 0.3, 0.0, -0.2);
        let xip0 = V4::new(0.0, 0.1, 0.05, 0.2);
        let e = 1e-6;
        let moved = push_connection(&conn, &TrajectoryState::new(0.0, e * xi0, y + e * xip0), (0.0, span), &IntegratorConfig::default()).unwrap();
        let jac = integrate_jacobi(&conn, &r, &JacobiState::new(0.0, xi0, xip0), (0.0, span), &IntegratorConfig::default(), 1e-4).unwrap();
        let fd = (moved.last().x - r.last().x) / e;
        let rel = (fd - jac.last().xi).norm() / jac.last().xi.norm();
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn reference_coverage_is_checked() {
        let flat = AffineTable::levi_civita_flat();
        let r = reference(&flat, lift(&[0.0, 1.0, 0.0]), 1.0);
        let st = JacobiState::new(1.5, V4::zeros(), V4::zeros());
        assert!(matches!(jacobi_rhs(&flat, &r, &st, 1e-4), Err(Error::OutOfRange { .. })));
    }

    fn solve(sys: &HillSystem, t1: f64) -> PrincipalSolutions {
        principal_solutions(sys, (0.0, t1), &IntegratorConfig::default()).unwrap()
    }

    #[test]
    fn principal_solution_oracles() {
        let ps = solve(&HillSystem::constant("free", 0.0), 3.0);
        for i in 0..ps.tau.len() {
            assert!((ps.c[i] - 1.0).abs() < 1e-14 && (ps.s[i] - ps.tau[i]).abs() < 1e-12);
        }
        let k: f64 = 2.5;
        let ps = solve(&HillSystem::constant("k", k), 10.0);
        let w = k.sqrt();
        for i in 0..ps.tau.len() {
            let t = ps.tau[i];
            assert!((ps.c[i] - (w * t).cos()).abs() < 1e-8);
            assert!((ps.s[i] - (w * t).sin() / w).abs() < 1e-8);
            assert!((ps.wronskian(i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wronskian_holds_for_undamped_presets() {
        let presets = [
            HillPreset::Dipole { rho: 1.0, conventional: false },
            HillPreset::Dipole { rho: 2.0, conventional: true },
            HillPreset::SkewDipole { rho: 1.5 },
            HillPreset::QuadDipole { b1: 0.7, rho: 3.0 },
            HillPreset::Quad45Dipole { b0: 0.4, b1: 0.7, rho: 3.0 },
            HillPreset::Rf { gamma: 5.0, e2_0: 0.01 },
        ];
        for p in presets {
            for (_, sys) in p.systems().unwrap() {
                let ps = solve(&sys, 3.0);
                let drift = (0..ps.tau.len()).map(|i| (ps.wronskian(i) - 1.0).abs()).fold(0.0, f64::max);
                assert!(drift < 1e-9, "{}: {drift}", sys.label);
                for &(a, b) in &[(0.3, 1.7), (2.9, 0.1)] {
                    assert!((green(&ps, a, b).unwrap() + green(&ps, b, a).unwrap()).abs() < 1e-15);
                }
                let (v, d) = particular_solution(&|t: f64| (2.0 * t).sin(), &ps);
                let sysp = sys.clone().with_perturbation(|t| (2.0 * t).sin());
                let res = substitution_residual(&sysp, &ps, &v, &d);
                assert!(res < 1e-6, "{}: {res}", sys.label);
            }
        }
    }

    #[test]
    fn preset_closed_forms() {
        let (_, d) = HillPreset::Dipole { rho: 1.0, conventional: false }.systems().unwrap().remove(0);
        let ps = solve(&d, 2.0);
        let n = ps.tau.len() - 1;
        let u = 1e-3 * ps.c[n];
        assert!((u - 1e-3 * 2f64.cosh()).abs() < 1e-6 * 1e-3);
        let b1 = 0.7;
        let q = HillPreset::QuadDipole { b1, rho: 3.0 }.systems().unwrap();
        let ps = solve(&q[1].1, 5.0);
        for i in 0..ps.tau.len() {
            assert!((ps.c[i] - (b1.sqrt() * ps.tau[i]).cos()).abs() < 1e-6);
        }
        // xi'' + E2 xi' = 0 from xi(0) = 0, xi'(0) = v0
        let e2 = 0.3;
        let v0 = 2e-3;
        let l = HillPreset::LongitudinalE { e2 }.systems().unwrap();
        let ps = solve(&l[0].1, 4.0);
        for i in 0..ps.tau.len() {
            let want = -(v0 / e2) * ((-e2 * ps.tau[i]).exp() - 1.0);
            assert!((v0 * ps.s[i] - want).abs() < 1e-6 * v0);
        }
        let rf = HillPreset::Rf { gamma: 10.0, e2_0: 0.02 }.systems().unwrap();
        let ps = solve(&rf[0].1, 2.0);
        let g = (2.0f64 * 10.0 * 0.02).sqrt();
        for i in 0..ps.tau.len() {
            assert!((ps.c[i] - (g * ps.tau[i]).cosh()).abs() < 1e-8);
        }
        assert!(HillPreset::Dipole { rho: 0.0, conventional: false }.systems().is_err());
    }

    #[test]
    fn green_and_particular_oracles() {
        let k: f64 = 1.7;
        let ps = solve(&HillSystem::constant("k", k), 4.0);
        for &(a, b) in &[(1.0, 0.2), (3.5, 2.0), (2.0, 2.0)] {
            let want = (k.sqrt() * (a - b)).sin() / k.sqrt();
            assert!((green(&ps, a, b).unwrap() - want).abs() < 1e-8);
        }
        let (p0, _) = particular_solution(&|_| 0.0, &ps);
        assert!(p0.iter().all(|v| *v == 0.0));
        let free = solve(&HillSystem::constant("free", 0.0), 3.0);
        let (p, _) = particular_solution(&|_| 1.0, &free);
        for (t, v) in free.tau.iter().zip(&p) {
            assert!((v - 0.5 * t * t).abs() < 1e-10);
        }
        let one = solve(&HillSystem::constant("one", 1.0), 10.0);
        let (p, d) = particular_solution(&|t: f64| t.cos(), &one);
        for (t, v) in one.tau.iter().zip(&p) {
            assert!((v - 0.5 * t * t.sin()).abs() < 1e-6);
        }
        let sys = HillSystem::constant("one", 1.0).with_perturbation(|t| t.cos());
        assert!(substitution_residual(&sys, &one, &p, &d) < 1e-6);
    }

    #[test]
    fn quadrature_is_exact_for_cubics_on_uneven_grids() {
        let x: Vec<f64> = (0..11).map(|i| (i as f64 * 0.3).powf(1.3)).collect();
        let f: Vec<f64> = x.iter().map(|t| 1.0 + 2.0 * t - t * t).collect();
        let c = cumulative_integral(&x, &f);
        for (t, v) in x.iter().zip(&c) {
            assert_relative_eq!(*v, t + t * t - t * t * t / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn offset_vanishes_for_delta_and_zero_field() {
        let cfg = IntegratorConfig::default();
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let d = HyperboloidEnsemble::delta(V4::zeros(), lift(&[0.0, 10f64.sqrt(), 0.0])).unwrap();
        for mode in [OffsetMode::Full, OffsetMode::Frozen] {
            let inp = OffsetInputs::from_transport(&f, &d, 1.0, 0.05, &cfg).unwrap();
            let r = averaged_offset(&f, &inp, mode, 1e-4).unwrap();
            assert!(r.max_abs() < 1e-12, "{}", r.max_abs());
        }
        let ens = cap_ens(0.05, 400);
        let zero = FieldPreset::Zero.build();
        let inp = OffsetInputs::from_transport(&zero, &ens, 1.0, 0.05, &cfg).unwrap();
        assert_eq!(averaged_offset(&zero, &inp, OffsetMode::Full, 1e-4).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn offset_is_collective() {
        let cfg = IntegratorConfig::default();
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let mut last = 0.0;
        for alpha in [0.02, 0.04, 0.08] {
            let inp = OffsetInputs::from_transport(&f, &cap_ens(alpha, 2000), 1.0, 0.05, &cfg).unwrap();
            let r = averaged_offset(&f, &inp, OffsetMode::Full, 1e-4).unwrap();
            assert!(r.max_abs() > last, "{alpha}: {}", r.max_abs());
            assert_eq!(r.off1[0], 0.0);
            last = r.max_abs();
        }
        let mut buf = Vec::new();
        OffsetReport { tau: vec![], off1: vec![], off3: vec![], mode: OffsetMode::Frozen }.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tau,off1,off3\n");
    }
}
