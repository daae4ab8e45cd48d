//! Weighted phase-space ensembles supported on the unit hyperboloid, their
//! moments, diameter and energy.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Metric, Observer, ObserverMetric};
use crate::{Error, Result, M4, V4};

/// Allowed `|eta(y,y) - 1|` for a sample to count as lying on the hyperboloid.
pub const SHELL_TOL: f64 = 1e-10;

/// Unit 4-velocity with the given spatial part (flat metric).
#[inline]
pub fn lift(spatial: &[f64; 3]) -> V4 {
    let u2 = spatial[0] * spatial[0] + spatial[1] * spatial[1] + spatial[2] * spatial[2];
    V4::new((1.0 + u2).sqrt(), spatial[0], spatial[1], spatial[2])
}

/// Re-lift a 4-vector from its spatial part.
#[inline]
pub fn relift(y: &V4) -> V4 {
    lift(&[y[1], y[2], y[3]])
}

/// Lift against an arbitrary metric; only the flat metric is supported.
pub fn lift_in(metric: &Metric, spatial: &[f64; 3]) -> Result<V4> {
    if !metric.flat {
        return Err(Error::invalid("metric", "lift is implemented for the flat metric only"));
    }
    Ok(lift(spatial))
}

/// Boost of `y` with rapidity `r` along spatial axis `axis` (1, 2 or 3).
#[inline]
pub fn boost(y: &V4, r: f64, axis: usize) -> V4 {
    let (c, s) = (r.cosh(), r.sinh());
    let mut out = *y;
    out[0] = c * y[0] + s * y[axis];
    out[axis] = s * y[0] + c * y[axis];
    out
}

/// Velocity with rapidity vector `w` in the rest frame, boosted by `r0` along `axis`.
pub fn from_rapidity(w: &[f64; 3], r0: f64, axis: usize) -> V4 {
    let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let rest = if n > 0.0 {
        let s = n.sinh() / n;
        V4::new(n.cosh(), s * w[0], s * w[1], s * w[2])
    } else {
        V4::new(1.0, 0.0, 0.0, 0.0)
    };
    relift(&boost(&rest, r0, axis))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSample {
    pub x: V4,
    pub y: V4,
    pub w: f64,
}

impl PhaseSample {
    pub fn new(x: V4, y: V4, w: f64) -> Self {
        PhaseSample { x, y, w }
    }
}

/// Generation record attached to an ensemble.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub generator: String,
    pub seed: Option<u64>,
    /// Diameter implied by the generator parameters, when known in closed form.
    pub analytic_alpha: Option<f64>,
    /// Energy implied by the generator parameters, when known in closed form.
    pub analytic_energy: Option<f64>,
}

/// Weighted samples on the unit hyperboloid at a common lab time.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperboloidEnsemble {
    pub samples: Vec<PhaseSample>,
    pub observer: Observer,
    pub meta: EnsembleMeta,
    /// Lab time of this slice.
    pub t: f64,
}

impl HyperboloidEnsemble {
    pub fn new(samples: Vec<PhaseSample>, observer: Observer, meta: EnsembleMeta) -> Result<Self> {
        let ens = HyperboloidEnsemble { t: samples.first().map_or(0.0, |s| s.x[0]), samples, observer, meta };
        ens.validate()?;
        Ok(ens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        let m = Metric::minkowski();
        let mut total = 0.0;
        for (i, s) in self.samples.iter().enumerate() {
            let r = m.norm_sq(&s.y) - 1.0;
            if !(r.abs() <= SHELL_TOL) || !(s.y[0] > 0.0) {
                return Err(Error::OffHyperboloid { index: i, residual: r });
            }
            if !(s.w >= 0.0) {
                return Err(Error::invalid("weight", format!("sample {i} has weight {}", s.w)));
            }
            total += s.w;
        }
        if !(total > 0.0) {
            return Err(Error::invalid("weight", "total weight must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn velocities(&self) -> Vec<V4> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.samples.iter().map(|s| s.w).sum()
    }

    /// Single sample at `x` with velocity `y`.
    pub fn delta(x: V4, y: V4) -> Result<Self> {
        let meta = EnsembleMeta {
            generator: "delta".into(),
            seed: None,
            analytic_alpha: Some(0.0),
            analytic_energy: Some(y[0]),
        };
        HyperboloidEnsemble::new(vec![PhaseSample::new(x, y, 1.0)], Observer::lab(), meta)
    }

    /// Write the `t, x0..x3, y0..y3, w` table.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "x0", "x1", "x2", "x3", "y0", "y1", "y2", "y3", "w"])?;
        for s in &self.samples {
            let mut rec = vec![fmt_f64(self.t)];
            rec.extend(s.x.iter().map(|v| fmt_f64(*v)));
            rec.extend(s.y.iter().map(|v| fmt_f64(*v)));
            rec.push(fmt_f64(s.w));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Read a table written by [`HyperboloidEnsemble::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let expect = ["t", "x0", "x1", "x2", "x3", "y0", "y1", "y2", "y3", "w"];
        if header.iter().collect::<Vec<_>>() != expect {
            return Err(Error::Io(format!("unexpected ensemble header {:?}", header)));
        }
        let mut samples = Vec::new();
        let mut t = 0.0;
        for rec in rd.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Io(e.to_string())))
                .collect::<Result<_>>()?;
            t = v[0];
            samples.push(PhaseSample::new(V4::new(v[1], v[2], v[3], v[4]), V4::new(v[5], v[6], v[7], v[8]), v[9]));
        }
        let mut ens = HyperboloidEnsemble::new(samples, Observer::lab(), EnsembleMeta { generator: "csv".into(), ..Default::default() })?;
        ens.t = t;
        Ok(ens)
    }
}

/// Shortest round-trip decimal form, so that output files are reproducible.
pub fn fmt_f64(v: f64) -> String {
    format!("{}", v)
}

/// How sample velocities are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VelocityLaw {
    /// All samples share the velocity with rapidity `r0` along the axis.
    Delta,
    /// Rapidity vector uniform in a ball of radius `r_cap`.
    RapidityCap { r_cap: f64 },
    /// Rapidity vector uniform in a disk of radius `r_cap` transverse to the axis.
    TransverseDisk { r_cap: f64 },
    /// Isotropic Gaussian rapidity vector with deviation `sigma`, truncated at `cutoff * sigma`.
    TruncatedGaussian { sigma: f64, cutoff: f64 },
}

/// Parameters of a synthetic ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub law: VelocityLaw,
    /// Central boost rapidity.
    pub r0: f64,
    /// Spatial axis of the central boost.
    #[serde(default = "default_axis")]
    pub axis: usize,
    pub n: usize,
    pub seed: u64,
    /// Gaussian spread of the spatial positions, independent of the velocities.
    #[serde(default)]
    pub position_sigma: f64,
    /// Pair every rapidity offset with its mirror image at the same position.
    #[serde(default)]
    pub antithetic: bool,
    /// Centre of the positions at lab time 0.
    #[serde(default)]
    pub origin: [f64; 3],
}

fn default_axis() -> usize {
    2
}

impl EnsembleSpec {
    pub fn new(law: VelocityLaw, r0: f64, n: usize, seed: u64) -> Self {
        EnsembleSpec { law, r0, axis: 2, n, seed, position_sigma: 0.0, antithetic: false, origin: [0.0; 3] }
    }

    /// Radius of the rapidity support.
    pub fn support_radius(&self) -> f64 {
        match self.law {
            VelocityLaw::Delta => 0.0,
            VelocityLaw::RapidityCap { r_cap } | VelocityLaw::TransverseDisk { r_cap } => r_cap,
            VelocityLaw::TruncatedGaussian { sigma, cutoff } => sigma * cutoff,
        }
    }

    /// Closed-form diameter of the support.
    pub fn analytic_alpha(&self) -> f64 {
        let r = self.support_radius();
        match self.law {
            VelocityLaw::Delta => 0.0,
            VelocityLaw::TransverseDisk { .. } => 2.0 * r.sinh(),
            _ => 2.0 * r.sinh() * (2.0 * self.r0).cosh().sqrt(),
        }
    }

    /// Closed-form infimum of `y^0` over the support.
    pub fn analytic_energy(&self) -> f64 {
        let r = self.support_radius();
        match self.law {
            VelocityLaw::Delta | VelocityLaw::TransverseDisk { .. } => self.r0.cosh(),
            _ => {
                if self.r0.abs() >= r {
                    (self.r0.abs() - r).cosh()
                } else {
                    1.0
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "must be positive"));
        }
        if !(1..=3).contains(&self.axis) {
            return Err(Error::invalid("axis", "must be 1, 2 or 3"));
        }
        if self.antithetic && self.n % 2 != 0 {
            return Err(Error::invalid("n", "antithetic ensembles need an even sample count"));
        }
        if !(self.support_radius() >= 0.0) || !self.r0.is_finite() || !(self.position_sigma >= 0.0) {
            return Err(Error::invalid("ensemble", "radii and spreads must be finite and non-negative"));
        }
        Ok(())
    }

    fn transverse_axes(&self) -> [usize; 2] {
        match self.axis {
            1 => [1, 2],
            2 => [0, 2],
            _ => [0, 1],
        }
    }

    fn draw_rapidity(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self.law {
            VelocityLaw::Delta => [0.0; 3],
            VelocityLaw::RapidityCap { r_cap } => {
                let d = unit_vector(rng);
                let rho = r_cap * rng.gen::<f64>().cbrt();
                [rho * d[0], rho * d[1], rho * d[2]]
            }
            VelocityLaw::TransverseDisk { r_cap } => {
                let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
                let rho = r_cap * rng.gen::<f64>().sqrt();
                let mut w = [0.0; 3];
                let [a, b] = self.transverse_axes();
                w[a] = rho * phi.cos();
                w[b] = rho * phi.sin();
                w
            }
            VelocityLaw::TruncatedGaussian { sigma, cutoff } => loop {
                let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let w = [sigma * g[0], sigma * g[1], sigma * g[2]];
                if (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt() <= cutoff * sigma {
                    break w;
                }
            },
        }
    }

    /// Draw the ensemble; identical specs give identical ensembles.
    pub fn generate(&self) -> Result<HyperboloidEnsemble> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut samples = Vec::with_capacity(self.n);
        let draws = if self.antithetic { self.n / 2 } else { self.n };
        for _ in 0..draws {
            let w = self.draw_rapidity(&mut rng);
            let mut x = V4::new(0.0, self.origin[0], self.origin[1], self.origin[2]);
            if self.position_sigma > 0.0 {
                for k in 1..4 {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    x[k] += self.position_sigma * g;
                }
            }
            samples.push(PhaseSample::new(x, from_rapidity(&w, self.r0, self.axis), 1.0));
            if self.antithetic {
                let m = [-w[0], -w[1], -w[2]];
                samples.push(PhaseSample::new(x, from_rapidity(&m, self.r0, self.axis), 1.0));
            }
        }
        let name = match self.law {
            VelocityLaw::Delta => "delta",
            VelocityLaw::RapidityCap { .. } => "rapidity-cap",
            VelocityLaw::TransverseDisk { .. } => "transverse-disk",
            VelocityLaw::TruncatedGaussian { .. } => "truncated-gaussian",
        };
        let meta = EnsembleMeta {
            generator: name.into(),
            seed: Some(self.seed),
            analytic_alpha: Some(self.analytic_alpha()),
            analytic_energy: Some(self.analytic_energy()),
        };
        HyperboloidEnsemble::new(samples, Observer::lab(), meta)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = 2.0 * rng.gen::<f64>() - 1.0;
    let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Weighted first, second and third velocity moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    /// Total weight.
    pub vol: f64,
    pub mean: V4,
    pub second: M4,
    /// `third[m][(s, l)] = <y^m y^s y^l>`, fully symmetric.
    pub third: [M4; 4],
}

impl MomentSet {
    /// Moments of a single velocity.
    pub fn point(y: &V4) -> Self {
        let second = y * y.transpose();
        MomentSet { vol: 1.0, mean: *y, second, third: [y[0] * second, y[1] * second, y[2] * second, y[3] * second] }
    }

    /// `<y^m (y.a)(y.b)>` with `a`, `b` given as covectors.
    #[inline]
    pub fn third_contract(&self, a_low: &V4, b_low: &V4) -> V4 {
        V4::from_fn(|m, _| (a_low.transpose() * self.third[m] * b_low)[0])
    }

    /// `eta_ij <y^i y^j>`, which is 1 for mass on the hyperboloid.
    pub fn shell_trace(&self) -> f64 {
        self.second[(0, 0)] - self.second[(1, 1)] - self.second[(2, 2)] - self.second[(3, 3)]
    }

    /// Linear combination `a*self + b*other`, used for interpolation in time.
    pub fn combine(&self, a: f64, other: &MomentSet, b: f64) -> MomentSet {
        MomentSet {
            vol: a * self.vol + b * other.vol,
            mean: a * self.mean + b * other.mean,
            second: a * self.second + b * other.second,
            third: [
                a * self.third[0] + b * other.third[0],
                a * self.third[1] + b * other.third[1],
                a * self.third[2] + b * other.third[2],
                a * self.third[3] + b * other.third[3],
            ],
        }
    }

    pub fn zero() -> Self {
        MomentSet { vol: 0.0, mean: V4::zeros(), second: M4::zeros(), third: [M4::zeros(); 4] }
    }

    /// Accumulate `w * y (x) y (x) y` and lower orders, left to right.
    #[inline]
    pub fn accumulate(&mut self, y: &V4, w: f64) {
        self.vol += w;
        self.mean += w * y;
        let yy = y * y.transpose();
        self.second += w * yy;
        for m in 0..4 {
            self.third[m] += (w * y[m]) * yy;
        }
    }

    /// Divide the accumulated sums by the total weight.
    pub fn normalized(mut self) -> Result<Self> {
        if !(self.vol > 0.0) {
            return Err(Error::Empty("moment weights"));
        }
        let inv = 1.0 / self.vol;
        self.mean *= inv;
        self.second *= inv;
        for m in 0..4 {
            self.third[m] *= inv;
        }
        Ok(self)
    }
}

/// Weighted moments, summed in sample order.
pub fn moments(ens: &HyperboloidEnsemble) -> Result<MomentSet> {
    if ens.samples.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    moments_of(ens.samples.iter().map(|s| (s.y, s.w)))
}

/// Moments of an arbitrary weighted velocity sequence.
pub fn moments_of(it: impl Iterator<Item = (V4, f64)>) -> Result<MomentSet> {
    let mut acc = MomentSet::zero();
    for (y, w) in it {
        acc.accumulate(&y, w);
    }
    acc.normalized()
}

/// Largest pairwise observer-metric chord distance between sample velocities.
///
/// Pairs are visited in decreasing distance from the centroid and the search
/// stops once `r_a + r_b` cannot beat the best distance found, which keeps the
/// result exact.
pub fn diameter_alpha(ens: &HyperboloidEnsemble, bar: &ObserverMetric) -> f64 {
    diameter_of(&ens.velocities(), bar)
}

pub fn diameter_of(ys: &[V4], bar: &ObserverMetric) -> f64 {
    if ys.len() < 2 {
        return 0.0;
    }
    let c: V4 = ys.iter().sum::<V4>() / ys.len() as f64;
    let mut r: Vec<(f64, usize)> = ys.iter().enumerate().map(|(i, y)| (bar.dist(y, &c), i)).collect();
    r.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut best = 0.0f64;
    for i in 0..r.len() {
        if 2.0 * r[i].0 <= best {
            break;
        }
        for j in (i + 1)..r.len() {
            if r[i].0 + r[j].0 <= best {
                break;
            }
            best = best.max(bar.dist(&ys[r[i].1], &ys[r[j].1]));
        }
    }
    best
}

/// Quadratic all-pairs diameter, the reference for [`diameter_alpha`].
pub fn diameter_brute_force(ys: &[V4], bar: &ObserverMetric) -> f64 {
    let mut best = 0.0f64;
    for i in 0..ys.len() {
        for j in (i + 1)..ys.len() {
            best = best.max(bar.dist(&ys[i], &ys[j]));
        }
    }
    best
}

/// Infimum over samples of the energy `eta(y, U)` seen by the ensemble's observer.
pub fn energy(ens: &HyperboloidEnsemble) -> f64 {
    let m = Metric::minkowski();
    ens.samples.iter().map(|s| m.dot(&s.y, &ens.observer.u)).fold(f64::INFINITY, f64::min)
}

/// Per-sample deviation `<y> - y_a`.
pub fn deltas(ens: &HyperboloidEnsemble, m: &MomentSet) -> Vec<V4> {
    ens.samples.iter().map(|s| m.mean - s.y).collect()
}
