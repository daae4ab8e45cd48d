//! Connection coefficients: the Lorentz connection and its `L`/`T` split, the
//! tilde connection, Berwald connections of arbitrary sprays, the averaged
//! Lorentz connection, numeric fibre averaging, torsion, curvature and the
//! difference between a velocity dependent connection and its average.
//!
//! Geodesics solve `x'' + Gamma(x')(x', x') = 0`. The coefficients are built
//! from `Phi = -F^i_j` so that auto-parallels on the hyperboloid reproduce
//! `dy/dtau = F y` for a field already multiplied by the charge.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::distribution::{HyperboloidEnsemble, MomentSet, SHELL_TOL};
use crate::fields::FaradayField;
use crate::geometry::Metric;
use crate::{Error, Result, M4, V4};

/// Table `Gamma^i_jk` stored as `0[i][(j, k)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs(pub [M4; 4]);

impl Coeffs {
    pub fn zeros() -> Self {
        Coeffs([M4::zeros(); 4])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.0[i][(j, k)]
    }

    /// `Gamma^i_jk u^j v^k`.
    #[inline]
    pub fn contract(&self, u: &V4, v: &V4) -> V4 {
        V4::from_fn(|i, _| (u.transpose() * self.0[i] * v)[0])
    }

    pub fn add(&self, o: &Coeffs) -> Coeffs {
        Coeffs(std::array::from_fn(|i| self.0[i] + o.0[i]))
    }

    pub fn sub(&self, o: &Coeffs) -> Coeffs {
        Coeffs(std::array::from_fn(|i| self.0[i] - o.0[i]))
    }

    pub fn scale(&self, a: f64) -> Coeffs {
        Coeffs(std::array::from_fn(|i| a * self.0[i]))
    }

    /// `Gamma^i_jk - Gamma^i_kj`.
    pub fn torsion(&self) -> Coeffs {
        Coeffs(std::array::from_fn(|i| self.0[i] - self.0[i].transpose()))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|m| m.amax()).fold(0.0, f64::max)
    }

    /// Plain-text table, one `i j k value` line per entry.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let _ = writeln!(s, "{i} {j} {k} {:.17e}", self.0[i][(j, k)]);
                }
            }
        }
        s
    }
}

/// Torsion of a coefficient table.
pub fn torsion(c: &Coeffs) -> Coeffs {
    c.torsion()
}

/// Possibly velocity dependent connection.
pub trait Connection: Send + Sync {
    fn coeffs(&self, x: &V4, y: &V4) -> Result<Coeffs>;

    fn label(&self) -> String;

    /// Geodesic acceleration `-Gamma(x, y)(y, y)`.
    fn accel(&self, x: &V4, y: &V4) -> Result<V4> {
        Ok(-self.coeffs(x, y)?.contract(y, y))
    }
}

/// Connection whose coefficients depend on the base point only.
pub trait AffineConnection: Connection {
    fn coeffs_at(&self, x: &V4) -> Result<Coeffs>;
}

fn check_timelike(metric: &Metric, y: &V4) -> Result<f64> {
    let n = metric.norm_sq(y);
    if !(n > 0.0) {
        return Err(Error::NotTimelike(n));
    }
    Ok(n.sqrt())
}

/// `L` and `T` parts of the Lorentz connection for `phi = -F^i_j`.
pub fn lorentz_parts(metric: &Metric, phi: &M4, y: &V4) -> Result<(Coeffs, Coeffs)> {
    let s = check_timelike(metric, y)?;
    let yl = metric.lower(y);
    let py = phi * y;
    let proj = metric.components - yl * yl.transpose() / (s * s);
    let l = std::array::from_fn(|i| {
        let a: V4 = phi.row(i).transpose();
        (a * yl.transpose() + yl * a.transpose()) / (2.0 * s)
    });
    let t = std::array::from_fn(|i| proj * (py[i] / (2.0 * s)));
    Ok((Coeffs(l), Coeffs(t)))
}

/// Velocity dependent Lorentz connection of a field.
#[derive(Debug, Clone)]
pub struct LorentzConnection {
    pub field: FaradayField,
}

impl LorentzConnection {
    pub fn new(field: FaradayField) -> Self {
        LorentzConnection { field }
    }

    pub fn l_part(&self, x: &V4, y: &V4) -> Result<Coeffs> {
        let (_, phi) = eval_phi(&self.field, x)?;
        Ok(lorentz_parts(self.field.metric(), &phi, y)?.0)
    }

    pub fn t_part(&self, x: &V4, y: &V4) -> Result<Coeffs> {
        let (_, phi) = eval_phi(&self.field, x)?;
        Ok(lorentz_parts(self.field.metric(), &phi, y)?.1)
    }
}

fn eval_phi(field: &FaradayField, x: &V4) -> Result<(M4, M4)> {
    let (f, fm) = field.eval(x)?;
    Ok((f, -fm))
}

impl Connection for LorentzConnection {
    fn coeffs(&self, x: &V4, y: &V4) -> Result<Coeffs> {
        let (_, phi) = eval_phi(&self.field, x)?;
        let (l, t) = lorentz_parts(self.field.metric(), &phi, y)?;
        Ok(l.add(&t))
    }

    fn label(&self) -> String {
        format!("lorentz[{}]", self.field.name)
    }

    fn accel(&self, x: &V4, y: &V4) -> Result<V4> {
        let s = check_timelike(self.field.metric(), y)?;
        let (_, fm) = self.field.eval(x)?;
        Ok(s * (fm * y))
    }
}

/// Lorentz connection with the transversal `T` part removed.
#[derive(Debug, Clone)]
pub struct TildeConnection {
    pub field: FaradayField,
}

impl TildeConnection {
    pub fn new(field: FaradayField) -> Self {
        TildeConnection { field }
    }
}

impl Connection for TildeConnection {
    fn coeffs(&self, x: &V4, y: &V4) -> Result<Coeffs> {
        let (_, phi) = eval_phi(&self.field, x)?;
        Ok(lorentz_parts(self.field.metric(), &phi, y)?.0)
    }

    fn label(&self) -> String {
        format!("tilde[{}]", self.field.name)
    }
}

type SprayFn = Arc<dyn Fn(&V4, &V4) -> V4 + Send + Sync>;

/// Spray coefficients `G^i(x, y)`.
#[derive(Clone)]
pub struct SprayField {
    pub name: String,
    f: SprayFn,
}

impl std::fmt::Debug for SprayField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SprayField").field("name", &self.name).finish()
    }
}

impl SprayField {
    pub fn new(name: impl Into<String>, f: impl Fn(&V4, &V4) -> V4 + Send + Sync + 'static) -> Self {
        SprayField { name: name.into(), f: Arc::new(f) }
    }

    #[inline]
    pub fn eval(&self, x: &V4, y: &V4) -> V4 {
        (self.f)(x, y)
    }

    /// `G = sqrt(eta(y,y)) Phi y`, whose halved Hessian is the Lorentz connection.
    pub fn lorentz(field: &FaradayField) -> Self {
        let field = field.clone();
        SprayField::new(format!("lorentz-spray[{}]", field.name), move |x, y| {
            let s = field.metric().norm_sq(y).max(0.0).sqrt();
            -s * (field.mixed(x) * y)
        })
    }
}

/// Berwald connection `Gamma^i_jk = 1/2 d^2 G^i / dy^j dy^k` by central differences.
#[derive(Debug, Clone)]
pub struct BerwaldConnection {
    pub spray: SprayField,
    pub h: f64,
}

impl BerwaldConnection {
    pub fn new(spray: SprayField, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::invalid("h", "finite-difference step must be positive"));
        }
        Ok(BerwaldConnection { spray, h })
    }
}

impl Connection for BerwaldConnection {
    fn coeffs(&self, x: &V4, y: &V4) -> Result<Coeffs> {
        let h = self.h;
        let g = |dj: usize, sj: f64, dk: usize, sk: f64| {
            let mut p = *y;
            p[dj] += sj * h;
            p[dk] += sk * h;
            self.spray.eval(x, &p)
        };
        let g0 = self.spray.eval(x, y);
        let mut out = Coeffs::zeros();
        for j in 0..4 {
            for k in j..4 {
                let d2 = if j == k {
                    (g(j, 1.0, j, 0.0) - 2.0 * g0 + g(j, -1.0, j, 0.0)) / (h * h)
                } else {
                    (g(j, 1.0, k, 1.0) - g(j, 1.0, k, -1.0) - g(j, -1.0, k, 1.0) + g(j, -1.0, k, -1.0)) / (4.0 * h * h)
                };
                for i in 0..4 {
                    out.0[i][(j, k)] = 0.5 * d2[i];
                    out.0[i][(k, j)] = 0.5 * d2[i];
                }
            }
        }
        if !out.max_abs().is_finite() {
            return Err(Error::NonFinite { module: "berwald", step: 0 });
        }
        Ok(out)
    }

    fn label(&self) -> String {
        format!("berwald[{}]", self.spray.name)
    }
}

/// Affine coefficients from an arbitrary evaluator.
#[derive(Clone)]
pub struct AffineTable {
    pub name: String,
    f: Arc<dyn Fn(&V4) -> Coeffs + Send + Sync>,
}

impl std::fmt::Debug for AffineTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AffineTable").field("name", &self.name).finish()
    }
}

impl AffineTable {
    pub fn new(name: impl Into<String>, f: impl Fn(&V4) -> Coeffs + Send + Sync + 'static) -> Self {
        AffineTable { name: name.into(), f: Arc::new(f) }
    }

    pub fn constant(name: impl Into<String>, c: Coeffs) -> Self {
        AffineTable::new(name, move |_| c)
    }

    /// Christoffel symbols of the flat metric in inertial coordinates.
    pub fn levi_civita_flat() -> Self {
        AffineTable::constant("levi-civita", Coeffs::zeros())
    }
}

impl Connection for AffineTable {
    fn coeffs(&self, x: &V4, _y: &V4) -> Result<Coeffs> {
        self.coeffs_at(x)
    }

    fn label(&self) -> String {
        self.name.clone()
    }
}

impl AffineConnection for AffineTable {
    fn coeffs_at(&self, x: &V4) -> Result<Coeffs> {
        Ok((self.f)(x))
    }
}

/// Supplies velocity moments at spacetime points.
pub trait MomentSource: Send + Sync {
    fn moments_at(&self, x: &V4) -> Result<MomentSet>;
}

impl MomentSource for MomentSet {
    fn moments_at(&self, _x: &V4) -> Result<MomentSet> {
        Ok(self.clone())
    }
}

/// Closed-form average of the Lorentz connection against moments `m`.
pub fn averaged_lorentz_coeffs(metric: &Metric, phi: &M4, m: &MomentSet) -> Coeffs {
    let eta = &metric.components;
    let mu_l = metric.lower(&m.mean);
    let pm = phi * m.mean;
    let q: [M4; 4] = std::array::from_fn(|k| eta * m.third[k] * eta);
    Coeffs(std::array::from_fn(|i| {
        let a: V4 = phi.row(i).transpose();
        let mut g = 0.5 * (a * mu_l.transpose() + mu_l * a.transpose()) + (0.5 * pm[i]) * eta;
        for (k, qk) in q.iter().enumerate() {
            g -= (0.5 * phi[(i, k)]) * qk;
        }
        g
    }))
}

/// `<Gamma>(v, v)` without building the table.
pub fn averaged_lorentz_contract(metric: &Metric, phi: &M4, m: &MomentSet, v: &V4) -> V4 {
    let vl = metric.lower(v);
    let mu_l = metric.lower(&m.mean);
    let qvv = m.third_contract(&vl, &vl);
    let pv = phi * v;
    pv * mu_l.dot(v) + 0.5 * (phi * (m.mean * vl.dot(v) - qvv))
}

/// The Lorentz connection averaged against a moment source.
#[derive(Clone)]
pub struct AveragedLorentz {
    pub field: FaradayField,
    pub moments: Arc<dyn MomentSource>,
}

impl std::fmt::Debug for AveragedLorentz {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AveragedLorentz").field("field", &self.field.name).finish()
    }
}

impl AveragedLorentz {
    pub fn new(field: FaradayField, moments: Arc<dyn MomentSource>) -> Self {
        AveragedLorentz { field, moments }
    }

    /// Averaged connection with moments frozen at `m`.
    pub fn frozen(field: FaradayField, m: MomentSet) -> Self {
        AveragedLorentz { field, moments: Arc::new(m) }
    }
}

impl Connection for AveragedLorentz {
    fn coeffs(&self, x: &V4, _y: &V4) -> Result<Coeffs> {
        self.coeffs_at(x)
    }

    fn label(&self) -> String {
        format!("averaged-lorentz[{}]", self.field.name)
    }

    fn accel(&self, x: &V4, y: &V4) -> Result<V4> {
        let (_, phi) = eval_phi(&self.field, x)?;
        let m = self.moments.moments_at(x)?;
        Ok(-averaged_lorentz_contract(self.field.metric(), &phi, &m, y))
    }
}

impl AffineConnection for AveragedLorentz {
    fn coeffs_at(&self, x: &V4) -> Result<Coeffs> {
        let (_, phi) = eval_phi(&self.field, x)?;
        let m = self.moments.moments_at(x)?;
        Ok(averaged_lorentz_coeffs(self.field.metric(), &phi, &m))
    }
}

/// Weighted ensemble average of a velocity dependent connection.
#[derive(Clone)]
pub struct NumericAverage {
    pub conn: Arc<dyn Connection>,
    support: Vec<(V4, f64)>,
}

impl NumericAverage {
    pub fn new(conn: Arc<dyn Connection>, ens: &HyperboloidEnsemble) -> Result<Self> {
        if ens.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        Ok(NumericAverage { conn, support: ens.samples.iter().map(|s| (s.y, s.w)).collect() })
    }
}

/// Average `conn` over the velocities of `ens`.
pub fn average_numeric(conn: Arc<dyn Connection>, ens: &HyperboloidEnsemble) -> Result<NumericAverage> {
    NumericAverage::new(conn, ens)
}

impl Connection for NumericAverage {
    fn coeffs(&self, x: &V4, _y: &V4) -> Result<Coeffs> {
        self.coeffs_at(x)
    }

    fn label(&self) -> String {
        format!("average[{}]", self.conn.label())
    }
}

impl AffineConnection for NumericAverage {
    fn coeffs_at(&self, x: &V4) -> Result<Coeffs> {
        let mut acc = Coeffs::zeros();
        let mut total = 0.0;
        for (y, w) in &self.support {
            let c = self.conn.coeffs(x, y)?;
            for i in 0..4 {
                acc.0[i] += *w * c.0[i];
            }
            total += w;
        }
        Ok(acc.scale(1.0 / total))
    }
}

/// Coordinate derivative `d_l Gamma` by central differences.
pub fn d_coeffs(c: &dyn AffineConnection, x: &V4, l: usize, h: f64) -> Result<Coeffs> {
    let mut xp = *x;
    let mut xm = *x;
    xp[l] += h;
    xm[l] -= h;
    Ok(c.coeffs_at(&xp)?.sub(&c.coeffs_at(&xm)?).scale(0.5 / h))
}

/// Curvature tensor `R^i_jkm` stored as `0[i][j][(k, m)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Riemann(pub [[M4; 4]; 4]);

impl Riemann {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, m: usize) -> f64 {
        self.0[i][j][(k, m)]
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().map(|m| m.amax()).fold(0.0, f64::max)
    }
}

/// `R^i_jkm = d_m G^i_jk - d_k G^i_jm + G^r_jk G^i_rm - G^r_jm G^i_rk`.
pub fn curvature(c: &dyn AffineConnection, x: &V4, h: f64) -> Result<Riemann> {
    if !(h > 0.0) {
        return Err(Error::invalid("h", "finite-difference step must be positive"));
    }
    let g = c.coeffs_at(x)?;
    let dg: [Coeffs; 4] = [d_coeffs(c, x, 0, h)?, d_coeffs(c, x, 1, h)?, d_coeffs(c, x, 2, h)?, d_coeffs(c, x, 3, h)?];
    let mut r = [[M4::zeros(); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                for m in 0..4 {
                    let mut v = dg[m].get(i, j, k) - dg[k].get(i, j, m);
                    for s in 0..4 {
                        v += g.get(s, j, k) * g.get(i, s, m) - g.get(s, j, m) * g.get(i, s, k);
                    }
                    r[i][j][(k, m)] = v;
                }
            }
        }
    }
    Ok(Riemann(r))
}

/// Difference between the Lorentz connection and its average along a sample,
/// split into the term linear in the deviation and the higher order parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifferenceTerms {
    pub exact: V4,
    pub leading: V4,
    pub o2: V4,
    pub o3: V4,
}

/// `Gamma_L(y)(y, y) - <Gamma_L>(y, y)` for a unit velocity `y`, with the
/// decomposition `leading + o2 + o3` assembled from the moments.
pub fn difference(field: &FaradayField, m: &MomentSet, x: &V4, y: &V4) -> Result<DifferenceTerms> {
    let metric = field.metric();
    let r = metric.norm_sq(y) - 1.0;
    if !(r.abs() <= SHELL_TOL) {
        return Err(Error::OffHyperboloid { index: 0, residual: r });
    }
    let (_, phi) = eval_phi(field, x)?;
    let (l, t) = lorentz_parts(metric, &phi, y)?;
    let avg = averaged_lorentz_coeffs(metric, &phi, m);
    let exact = l.add(&t).sub(&avg).contract(y, y);

    let yl = metric.lower(y);
    let mu = m.mean;
    let p = mu.dot(&yl);
    let d = p - 1.0;
    let c2 = (yl.transpose() * m.second * yl)[0];
    let yc = m.second * yl;
    let yc2 = m.third_contract(&yl, &yl);
    let s2 = c2 - p * p;
    let w = yc - p * mu;
    let c3 = mu * s2 - p * p * mu + 2.0 * p * yc - yc2;
    let leading = phi * (mu - y) * d;
    let o2 = phi * (0.5 * (d * d + s2) * mu + p * w);
    let o3 = -0.5 * (phi * c3);
    Ok(DifferenceTerms { exact, leading, o2, o3 })
}

/// Largest `|C(y)(y, y) - <C>(y, y)|` over the ensemble support, where `<C>`
/// is the numeric ensemble average of `C`.
pub fn structural_probe(
    conn: Arc<dyn Connection>,
    ens: &HyperboloidEnsemble,
    x: &V4,
    bar: &crate::geometry::ObserverMetric,
) -> Result<f64> {
    let avg = average_numeric(conn.clone(), ens)?.coeffs_at(x)?;
    let mut best = 0.0f64;
    for s in &ens.samples {
        let v = conn.coeffs(x, &s.y)?.contract(&s.y, &s.y) - avg.contract(&s.y, &s.y);
        best = best.max(bar.norm(&v));
    }
    Ok(best)
}
