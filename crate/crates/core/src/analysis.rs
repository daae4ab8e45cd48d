//! Lorentz versus averaged-Lorentz comparison harness, log-log exponent fits,
//! validity horizons and scaling sweeps.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connections::{Connection, LorentzConnection, TildeConnection};
use crate::distribution::{diameter_alpha, energy, fmt_f64, moments, EnsembleSpec, HyperboloidEnsemble, PhaseSample, VelocityLaw};
use crate::dynamics::{co_transport, IntegratorConfig, MomentMode, PairedTransport, TrajectoryRecord, TrajectoryState};
use crate::fields::{field_norm, FaradayField};
use crate::geometry::{eta_bar, Metric, ObserverMetric};
use crate::{Error, Result, V4};

/// Order-one constants of the comparison bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConstants {
    pub c: f64,
    pub c2: f64,
    pub b2: f64,
    pub k: f64,
    pub k2: f64,
    pub d2: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants { c: 4.0, c2: 4.0, b2: 4.0, k: 4.0, k2: 4.0, d2: 4.0 }
    }
}

impl BoundConstants {
    /// `2 (C |F| + C2^2 (1 + B2 a)) a^2 E^-2 t^2`.
    pub fn position_bound(&self, f: f64, alpha: f64, e: f64, t: f64) -> f64 {
        2.0 * (self.c * f + self.c2 * self.c2 * (1.0 + self.b2 * alpha)) * alpha * alpha * t * t / (e * e)
    }

    /// `(K |F| + K2^2 (1 + D2 a)) a^2 E^-1 t`.
    pub fn velocity_bound(&self, f: f64, alpha: f64, e: f64, t: f64) -> f64 {
        (self.k * f + self.k2 * self.k2 * (1.0 + self.d2 * alpha)) * alpha * alpha * t / e
    }

    /// Right side of the distribution comparison, with the printed products.
    pub fn divergence_bound(&self, f: f64, alpha: f64, e: f64, t: f64) -> f64 {
        let a2 = alpha * alpha;
        self.c * f * self.c2 * self.c2 * (1.0 + self.b2 * alpha) * a2 * t * t / (e * e)
            + self.k * f * self.k2 * self.k2 * (1.0 + self.d2 * alpha) * a2 * t / e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Elapsed lab time since the common initial condition.
    pub times: Vec<f64>,
    pub position_separation: Vec<f64>,
    pub velocity_separation: Vec<f64>,
    pub position_bound: Vec<f64>,
    pub velocity_bound: Vec<f64>,
    pub alpha: f64,
    pub energy: f64,
    pub field_norm: f64,
    pub init_index: Option<usize>,
    /// Largest `|eta(y~, y~) - 1|` along the averaged trajectory.
    pub averaged_shell_drift: f64,
    /// Largest `|theta^2 - theta_bar^2|` over the output times.
    pub theta_gap: f64,
    /// Largest `|d log E / dt|` between output times.
    pub log_energy_rate: f64,
    pub within_bounds: bool,
    pub warnings: Vec<String>,
}

impl ComparisonReport {
    pub fn max_position_separation(&self) -> f64 {
        self.position_separation.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_velocity_separation(&self) -> f64 {
        self.velocity_separation.iter().cloned().fold(0.0, f64::max)
    }

    /// Series table `t, position_separation, velocity_separation, position_bound, velocity_bound`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "position_separation", "velocity_separation", "position_bound", "velocity_bound"])?;
        for i in 0..self.times.len() {
            wr.write_record([
                fmt_f64(self.times[i]),
                fmt_f64(self.position_separation[i]),
                fmt_f64(self.velocity_separation[i]),
                fmt_f64(self.position_bound[i]),
                fmt_f64(self.velocity_bound[i]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Index of the sample whose velocity lies farthest from the mean.
pub fn farthest_from_mean(ens: &HyperboloidEnsemble, bar: &ObserverMetric) -> Result<usize> {
    let m = moments(ens)?;
    let mut best = (0usize, -1.0f64);
    for (i, s) in ens.samples.iter().enumerate() {
        let d = bar.dist(&s.y, &m.mean);
        if d > best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

fn spatial_sq(y: &V4) -> f64 {
    y[1] * y[1] + y[2] * y[2] + y[3] * y[3]
}

/// Push the Lorentz flow and the averaged flow from one initial condition and
/// compare them at equal lab times.
///
/// Without `init`, the support sample farthest from the mean velocity is used.
/// The ensemble is transported with the Lorentz flow and supplies the moments
/// of the averaged connection at every stage unless `mode` freezes them.
pub fn compare_trajectories(
    field: &FaradayField,
    ens: &HyperboloidEnsemble,
    init: Option<TrajectoryState>,
    times: &[f64],
    cfg: &IntegratorConfig,
    consts: &BoundConstants,
    mode: MomentMode,
) -> Result<ComparisonReport> {
    let bar = eta_bar(&Metric::minkowski(), &ens.observer)?;
    let alpha = diameter_alpha(ens, &bar);
    let e = energy(ens);
    let mut warnings = Vec::new();
    let mut work = ens.clone();
    let (index, start) = match init {
        None => {
            let i = farthest_from_mean(ens, &bar)?;
            let s = ens.samples[i];
            (i, TrajectoryState::new(0.0, s.x, s.y))
        }
        Some(st) => {
            let on_support = ens.samples.iter().any(|s| bar.dist(&s.y, &st.y) <= 1e-12 * st.y[0]);
            if !on_support {
                warnings.push("initial velocity is off the ensemble support".to_string());
            }
            work.samples.push(PhaseSample::new(st.x, st.y, 0.0));
            (work.samples.len() - 1, st)
        }
    };
    let t0 = start.x[0];
    let pair = co_transport(field, &work, &[start], times, cfg, mode)?;
    build_report(field, &pair, index, t0, alpha, e, &bar, consts, warnings, init.is_none().then_some(index))
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    field: &FaradayField,
    pair: &PairedTransport,
    index: usize,
    t0: f64,
    alpha: f64,
    e: f64,
    bar: &ObserverMetric,
    consts: &BoundConstants,
    mut warnings: Vec<String>,
    init_index: Option<usize>,
) -> Result<ComparisonReport> {
    let metric = Metric::minkowski();
    let n = pair.lorentz.slices.len();
    let mut rep = ComparisonReport {
        times: Vec::with_capacity(n),
        position_separation: Vec::with_capacity(n),
        velocity_separation: Vec::with_capacity(n),
        position_bound: Vec::with_capacity(n),
        velocity_bound: Vec::with_capacity(n),
        alpha,
        energy: e,
        field_norm: 0.0,
        init_index,
        averaged_shell_drift: 0.0,
        theta_gap: 0.0,
        log_energy_rate: 0.0,
        within_bounds: true,
        warnings: Vec::new(),
    };
    let mut energies = Vec::with_capacity(n);
    for sl in pair.lorentz.slices.iter() {
        let s = &sl.samples[index];
        rep.field_norm = rep.field_norm.max(field_norm(field, &s.x, bar));
        energies.push(sl.samples.iter().filter(|p| p.w > 0.0).map(|p| p.y[0]).fold(f64::INFINITY, f64::min));
    }
    for (k, (sl, tr)) in pair.lorentz.slices.iter().zip(&pair.tracers).enumerate() {
        let s = &sl.samples[index];
        let a = &tr[0];
        let t = sl.t - t0;
        rep.times.push(t);
        rep.position_separation.push(bar.dist(&a.x, &s.x));
        rep.velocity_separation.push(bar.dist(&a.y, &s.y));
        rep.position_bound.push(consts.position_bound(rep.field_norm, alpha, e, t));
        rep.velocity_bound.push(consts.velocity_bound(rep.field_norm, alpha, e, t));
        rep.averaged_shell_drift = rep.averaged_shell_drift.max((metric.norm_sq(&a.y) - 1.0).abs());
        let mu = &pair.moments[k].mean;
        let theta = spatial_sq(&s.y) - spatial_sq(mu);
        let theta_bar = spatial_sq(mu) - spatial_sq(&a.y);
        rep.theta_gap = rep.theta_gap.max((theta - theta_bar).abs());
        if k > 0 {
            let dt = sl.t - pair.lorentz.slices[k - 1].t;
            if dt > 0.0 {
                rep.log_energy_rate = rep.log_energy_rate.max(((energies[k] / energies[k - 1]).ln() / dt).abs());
            }
        }
    }
    for i in 0..rep.times.len() {
        // integrator rounding accumulated along the orbit
        let slack = 1e-10 * (1.0 + rep.times[i].abs());
        if rep.position_separation[i] > rep.position_bound[i] + slack || rep.velocity_separation[i] > rep.velocity_bound[i] + slack {
            rep.within_bounds = false;
            warnings.push(format!(
                "bound violated at alpha = {}, E = {}, t = {}",
                fmt_f64(alpha),
                fmt_f64(e),
                fmt_f64(rep.times[i])
            ));
        }
    }
    if rep.log_energy_rate > 0.01 {
        warnings.push(format!("energy is not adiabatic: |d log E/dt| = {:e}", rep.log_energy_rate));
    }
    if rep.theta_gap > 0.1 {
        warnings.push(format!("|theta^2 - theta_bar^2| = {:e} is not small", rep.theta_gap));
    }
    rep.warnings = warnings;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub param: String,
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(log param, log response)`.
pub fn fit_scaling(param: &str, points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 4 {
        return Err(Error::invalid("sweep", "at least four points are needed"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(Error::invalid("sweep", "log-log fits need positive data"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::invalid("sweep", "parameter values must not all coincide"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    Ok(ScalingFit { param: param.to_string(), points: points.to_vec(), slope, intercept, r2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonConstants {
    pub c1: f64,
    pub k: f64,
    pub a: f64,
}

impl Default for HorizonConstants {
    fn default() -> Self {
        HorizonConstants { c1: 4.0, k: 4.0, a: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub t_max_position: f64,
    pub t_max_velocity: f64,
    pub l_max: f64,
    pub beam_length: f64,
    pub weak: bool,
    pub constants: HorizonConstants,
}

/// Lab times and length beyond which the averaged dynamics is not controlled.
pub fn validity_horizon(
    e0: f64,
    alpha: f64,
    f_norm: f64,
    l_max_geom: f64,
    beam_length: f64,
    consts: &HorizonConstants,
) -> Result<ValidityReport> {
    for (name, v) in [("E0", e0), ("alpha", alpha), ("field norm", f_norm), ("L_max", l_max_geom), ("beam length", beam_length)] {
        if !(v > 0.0) {
            return Err(Error::Invalid { name: "validity input", reason: format!("{name} must be positive, got {v}") });
        }
    }
    if !(consts.c1 > 0.0 && consts.k > 0.0 && consts.a > 0.0) {
        return Err(Error::invalid("constants", "must be positive"));
    }
    let t1 = (l_max_geom / consts.c1).sqrt() * (e0 / alpha) / f_norm.sqrt();
    let t2 = consts.k * (e0 / alpha) / f_norm;
    let l_max = consts.a / f_norm;
    Ok(ValidityReport {
        t_max_position: t1,
        t_max_velocity: t2,
        l_max,
        beam_length,
        weak: l_max <= beam_length,
        constants: *consts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub times: Vec<f64>,
    /// Largest `|x_L - x_A| + |y_L - y_A|` over the samples.
    pub divergence: Vec<f64>,
    pub bound: Vec<f64>,
    pub alpha: f64,
    pub energy: f64,
    pub field_norm: f64,
}

/// Phase-space displacement between the Vlasov and averaged Vlasov transports
/// of the same initial ensemble.
pub fn distribution_divergence(
    field: &FaradayField,
    ens: &HyperboloidEnsemble,
    times: &[f64],
    cfg: &IntegratorConfig,
    consts: &BoundConstants,
) -> Result<DivergenceReport> {
    let bar = eta_bar(&Metric::minkowski(), &ens.observer)?;
    let alpha = diameter_alpha(ens, &bar);
    let e = energy(ens);
    let tracers: Vec<TrajectoryState> = ens.samples.iter().map(|s| TrajectoryState::new(0.0, s.x, s.y)).collect();
    let pair = co_transport(field, ens, &tracers, times, cfg, MomentMode::Transported)?;
    let t0 = ens.samples[0].x[0];
    let mut fnorm = 0.0f64;
    for sl in &pair.lorentz.slices {
        for s in &sl.samples {
            fnorm = fnorm.max(field_norm(field, &s.x, &bar));
        }
    }
    let mut rep = DivergenceReport { times: vec![], divergence: vec![], bound: vec![], alpha, energy: e, field_norm: fnorm };
    for (sl, tr) in pair.lorentz.slices.iter().zip(&pair.tracers) {
        let d = sl
            .samples
            .iter()
            .zip(tr)
            .map(|(s, a)| bar.dist(&s.x, &a.x) + bar.dist(&s.y, &a.y))
            .fold(0.0, f64::max);
        let t = sl.t - t0;
        rep.times.push(t);
        rep.divergence.push(d);
        rep.bound.push(consts.divergence_bound(fnorm, alpha, e, t));
    }
    Ok(rep)
}

/// Radius and lab-time period of a gyration measured from a sampled orbit.
///
/// The radius is half the extent of `x^axis`; the period is the lab time at
/// which `y^vel` first returns to its initial value moving the same way.
pub fn gyro_measure(rec: &TrajectoryRecord, axis: usize, vel: usize) -> Result<(f64, f64)> {
    let st = &rec.states;
    if st.len() < 3 {
        return Err(Error::Empty("trajectory"));
    }
    let (lo, hi) = st.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.x[axis]), hi.max(s.x[axis])));
    let start = st[0].y[vel];
    let sign = if rec.accels[0][vel] >= 0.0 { 1.0 } else { -1.0 };
    let mut period = None;
    for i in 2..st.len() {
        let (a, b) = (sign * (st[i - 1].y[vel] - start), sign * (st[i].y[vel] - start));
        if a < 0.0 && b >= 0.0 {
            let h = st[i].s - st[i - 1].s;
            let th = hermite_root(a, sign * rec.accels[i - 1][vel], b, sign * rec.accels[i][vel], h);
            let x0 = crate::dynamics::hermite(&st[i - 1].x, &st[i - 1].y, &st[i].x, &st[i].y, h, th)[0];
            period = Some(x0 - st[0].x[0]);
            break;
        }
    }
    let period = period.ok_or_else(|| Error::invalid("trajectory", "no full gyration in the record"))?;
    Ok((0.5 * (hi - lo), period))
}

fn hermite_root(p0: f64, v0: f64, p1: f64, v1: f64, h: f64) -> f64 {
    let f = |t: f64| {
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * p0 + (t3 - 2.0 * t2 + t) * h * v0 + (-2.0 * t3 + 3.0 * t2) * p1 + (t3 - t2) * h * v1
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Benchmark ensemble family used by the scaling sweeps: a transverse rapidity
/// disk of radius `asinh(alpha / 2)` around the boost with `cosh r0 = E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub transverse: bool,
}

fn default_true() -> bool {
    true
}

impl Benchmark {
    pub fn spec(&self, alpha: f64, e: f64) -> EnsembleSpec {
        let r0 = e.acosh();
        let law = if self.transverse {
            VelocityLaw::TransverseDisk { r_cap: (0.5 * alpha).asinh() }
        } else {
            VelocityLaw::RapidityCap { r_cap: (0.5 * alpha / (2.0 * r0).cosh().sqrt()).asinh() }
        };
        EnsembleSpec::new(law, r0, self.n, self.seed)
    }

    pub fn ensemble(&self, alpha: f64, e: f64) -> Result<HyperboloidEnsemble> {
        self.spec(alpha, e).generate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub energy: f64,
    pub t: f64,
    pub position_separation: f64,
    pub velocity_separation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Alpha,
    Energy,
    Time,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Energy => "energy",
            SweepParam::Time => "t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    pub position_fit: ScalingFit,
    pub velocity_fit: ScalingFit,
}

/// Sweep one of `alpha`, `E` or `t` with the other two fixed and fit the
/// separations on log-log axes. The measured diameter and energy of each
/// generated ensemble are the abscissae.
pub fn run_sweep(
    field: &FaradayField,
    bench: &Benchmark,
    param: SweepParam,
    values: &[f64],
    alpha: f64,
    e: f64,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<SweepReport> {
    let bar = ObserverMetric::lab();
    let mut points = Vec::new();
    let one = |a: f64, en: f64, times: &[f64]| -> Result<Vec<SweepPoint>> {
        let ens = bench.ensemble(a, en)?;
        let alpha_m = diameter_alpha(&ens, &bar);
        let e_m = energy(&ens);
        let rep = compare_trajectories(field, &ens, None, times, cfg, &BoundConstants::default(), MomentMode::Transported)?;
        Ok(rep
            .times
            .iter()
            .enumerate()
            .map(|(i, &tt)| SweepPoint {
                alpha: alpha_m,
                energy: e_m,
                t: tt,
                position_separation: rep.position_separation[i],
                velocity_separation: rep.velocity_separation[i],
            })
            .collect())
    };
    match param {
        SweepParam::Alpha => {
            for &a in values {
                points.push(one(a, e, &[t])?.remove(0));
            }
        }
        SweepParam::Energy => {
            for &en in values {
                points.push(one(alpha, en, &[t])?.remove(0));
            }
        }
        SweepParam::Time => {
            points = one(alpha, e, values)?;
        }
    }
    let x = |p: &SweepPoint| match param {
        SweepParam::Alpha => p.alpha,
        SweepParam::Energy => p.energy,
        SweepParam::Time => p.t,
    };
    let pos: Vec<(f64, f64)> = points.iter().map(|p| (x(p), p.position_separation)).collect();
    let vel: Vec<(f64, f64)> = points.iter().map(|p| (x(p), p.velocity_separation)).collect();
    Ok(SweepReport {
        param,
        position_fit: fit_scaling(param.name(), &pos)?,
        velocity_fit: fit_scaling(param.name(), &vel)?,
        points,
    })
}

/// Structural-stability probe of the Lorentz and tilde connections against
/// their own ensemble averages, over a sequence of ensembles.
pub fn structural_sweep(
    field: &FaradayField,
    ensembles: &[HyperboloidEnsemble],
    x: &V4,
) -> Result<(ScalingFit, ScalingFit)> {
    let bar = ObserverMetric::lab();
    let lorentz: Arc<dyn Connection> = Arc::new(LorentzConnection::new(field.clone()));
    let tilde: Arc<dyn Connection> = Arc::new(TildeConnection::new(field.clone()));
    let mut pl = Vec::new();
    let mut pt = Vec::new();
    for ens in ensembles {
        let a = diameter_alpha(ens, &bar);
        pl.push((a, crate::connections::structural_probe(lorentz.clone(), ens, x, &bar)?));
        pt.push((a, crate::connections::structural_probe(tilde.clone(), ens, x, &bar)?));
    }
    Ok((fit_scaling("alpha", &pl)?, fit_scaling("alpha", &pt)?))
}
