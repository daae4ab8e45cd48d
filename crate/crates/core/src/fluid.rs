//! Fluid reduction of a kinetic ensemble: mean-velocity fields on a co-moving
//! tube of cells, the auto-parallel residual of the mean field, Sobolev norms
//! of gridded velocity densities and the right side of the residual bound.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connections::{AffineConnection, AveragedLorentz, MomentSource};
use crate::distribution::{diameter_of, fmt_f64, moments_of, HyperboloidEnsemble, MomentSet};
use crate::dynamics::{co_transport, transport_ensemble, EnsembleSeries, EnsembleSlice, IntegratorConfig, MomentMode, TrajectoryState};
use crate::fields::FaradayField;
use crate::geometry::{Metric, ObserverMetric};
use crate::{Error, Result, V4};

/// Layout of the co-moving tube of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TubeSpec {
    pub cells: usize,
    /// Tube width in units of the positional spread along `axis`.
    pub width_factor: f64,
    /// Spatial axis across which the cells are laid out.
    pub axis: usize,
}

impl Default for TubeSpec {
    fn default() -> Self {
        TubeSpec { cells: 5, width_factor: 4.0, axis: 1 }
    }
}

/// Gaussian-kernel estimate of the local velocity moments of one lab-time slice.
///
/// With no bandwidth every sample counts fully at every point, which is the
/// single-cell limit used for ensembles without positional spread.
#[derive(Debug, Clone)]
pub struct KernelMoments {
    pub t: f64,
    xs: Arc<Vec<V4>>,
    ys: Arc<Vec<V4>>,
    ws: Arc<Vec<f64>>,
    pub bandwidth: Option<f64>,
}

impl KernelMoments {
    pub fn new(slice: &EnsembleSlice, bandwidth: Option<f64>) -> Self {
        KernelMoments {
            t: slice.t,
            xs: Arc::new(slice.samples.iter().map(|s| s.x).collect()),
            ys: Arc::new(slice.samples.iter().map(|s| s.y).collect()),
            ws: Arc::new(slice.samples.iter().map(|s| s.w).collect()),
            bandwidth,
        }
    }

    /// Kernel weight of every sample at the spatial position of `x`.
    pub fn weights(&self, x: &V4) -> Vec<f64> {
        match self.bandwidth {
            None => self.ws.to_vec(),
            Some(h) => self
                .xs
                .iter()
                .zip(self.ws.iter())
                .map(|(p, w)| {
                    let d2 = (p[1] - x[1]).powi(2) + (p[2] - x[2]).powi(2) + (p[3] - x[3]).powi(2);
                    w * (-0.5 * d2 / (h * h)).exp()
                })
                .collect(),
        }
    }

    pub fn velocities(&self) -> &[V4] {
        &self.ys
    }

    /// Local moments with the total kernel weight in `vol`.
    pub fn at(&self, x: &V4) -> Result<MomentSet> {
        let k = self.weights(x);
        moments_of(self.ys.iter().zip(&k).map(|(y, w)| (*y, *w)))
    }
}

impl MomentSource for KernelMoments {
    fn moments_at(&self, x: &V4) -> Result<MomentSet> {
        self.at(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidCell {
    pub index: usize,
    pub x: V4,
    /// `None` when no sample weight reaches the cell.
    pub moments: Option<MomentSet>,
    pub weight: f64,
}

impl FluidCell {
    pub fn velocity(&self) -> Option<V4> {
        self.moments.as_ref().map(|m| m.mean)
    }
}

#[derive(Debug, Clone)]
pub struct FluidSlice {
    pub t: f64,
    pub cells: Vec<FluidCell>,
    pub kernel: KernelMoments,
}

impl FluidSlice {
    pub fn occupied(&self) -> impl Iterator<Item = &FluidCell> {
        self.cells.iter().filter(|c| c.moments.is_some())
    }
}

/// Weighted centroid and spread along `axis` of the slice positions.
fn centroid_spread(slice: &EnsembleSlice, axis: usize) -> (V4, f64) {
    let wsum: f64 = slice.samples.iter().map(|s| s.w).sum();
    let c = slice.samples.iter().fold(V4::zeros(), |a, s| a + s.w * s.x) / wsum;
    let var = slice.samples.iter().map(|s| s.w * (s.x[axis] - c[axis]).powi(2)).sum::<f64>() / wsum;
    (c, var.max(0.0).sqrt())
}

/// Kernel bandwidth fixed by the positional spread of a reference slice;
/// `None` when the slice has no spread.
pub fn tube_bandwidth(slice: &EnsembleSlice, tube: &TubeSpec) -> Result<Option<f64>> {
    if tube.cells == 0 || !(1..=3).contains(&tube.axis) || !(tube.width_factor > 0.0) {
        return Err(Error::invalid("tube", "needs at least one cell, a spatial axis and a positive width"));
    }
    if slice.samples.is_empty() {
        return Err(Error::Empty("slice"));
    }
    let (_, sigma) = centroid_spread(slice, tube.axis);
    Ok((sigma > 1e-12).then(|| tube.width_factor * sigma / tube.cells as f64))
}

/// Cell centres across the tube around the centroid of a slice.
pub fn tube_cells(slice: &EnsembleSlice, tube: &TubeSpec, bandwidth: Option<f64>) -> Vec<V4> {
    let (c, _) = centroid_spread(slice, tube.axis);
    let Some(spacing) = bandwidth else { return vec![c] };
    let mid = 0.5 * (tube.cells as f64 - 1.0);
    (0..tube.cells)
        .map(|k| {
            let mut x = c;
            x[tube.axis] += (k as f64 - mid) * spacing;
            x
        })
        .collect()
}

/// Per-cell moments of every slice, on a tube that follows the centroid.
///
/// The kernel bandwidth and the cell spacing are set once from the first slice.
pub fn mean_field(series: &EnsembleSeries, tube: &TubeSpec) -> Result<Vec<FluidSlice>> {
    let first = series.slices.first().ok_or(Error::Empty("series"))?;
    let bw = tube_bandwidth(first, tube)?;
    let mut out = Vec::with_capacity(series.slices.len());
    for sl in &series.slices {
        let kernel = KernelMoments::new(sl, bw);
        let total: f64 = sl.samples.iter().map(|s| s.w).sum();
        let mut cells = Vec::new();
        for (index, x) in tube_cells(sl, tube, bw).into_iter().enumerate() {
            let m = kernel.at(&x).ok().filter(|m| m.vol > 1e-12 * total);
            let weight = m.as_ref().map_or(0.0, |m| m.vol);
            cells.push(FluidCell { index, x, moments: m, weight });
        }
        if cells.iter().all(|c| c.moments.is_none()) {
            return Err(Error::Empty("fluid cells"));
        }
        out.push(FluidSlice { t: sl.t, cells, kernel });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub vector: V4,
    pub norm: f64,
}

/// Stencil steps: `dt` in slices either side, `h` in space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub k: usize,
    pub dt_slices: usize,
    pub h: f64,
}

fn stencil_velocity(slices: &[FluidSlice], st: &Stencil, x: &V4) -> Result<(V4, [V4; 4])> {
    let k = st.k;
    let d = st.dt_slices;
    if d == 0 || k < 2 * d || k + 2 * d >= slices.len() {
        return Err(Error::Stencil(format!("slice {k} lacks {} neighbours in time", 2 * d)));
    }
    let v_at = |sl: &FluidSlice, p: &V4| -> Result<V4> {
        sl.kernel.at(p).map(|m| m.mean).map_err(|_| Error::Stencil(format!("empty kernel at t = {}", sl.t)))
    };
    let centre = &slices[k];
    let dt = slices[k + d].t - centre.t;
    let even = [slices[k - 2 * d].t, slices[k - d].t, slices[k + 2 * d].t]
        .iter()
        .zip([-2.0, -1.0, 2.0])
        .all(|(t, j)| (t - centre.t - j * dt).abs() <= 1e-9 * dt.abs().max(1.0));
    if !(dt > 0.0) || !even {
        return Err(Error::Stencil(format!("slices around t = {} are not evenly spaced", centre.t)));
    }
    let v = v_at(centre, x)?;
    let vs = [v_at(&slices[k - 2 * d], x)?, v_at(&slices[k - d], x)?, v_at(&slices[k + d], x)?, v_at(&slices[k + 2 * d], x)?];
    let mut dv = [five_point(&vs, dt), V4::zeros(), V4::zeros(), V4::zeros()];
    if centre.kernel.bandwidth.is_some() {
        for j in 1..4 {
            let at = |m: f64| {
                let mut p = *x;
                p[j] += m * st.h;
                v_at(centre, &p)
            };
            dv[j] = five_point(&[at(-2.0)?, at(-1.0)?, at(1.0)?, at(2.0)?], st.h);
        }
    }
    Ok((v, dv))
}

/// Fourth-order central first derivative from values at `-2h, -h, h, 2h`.
fn five_point(v: &[V4; 4], h: f64) -> V4 {
    (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h)
}

/// `V^j d_j V + <Gamma>(V, V)` at `x` on slice `st.k`, with derivatives by
/// fourth-order central differences in lab coordinates.
pub fn residual(slices: &[FluidSlice], coeffs: &dyn AffineConnection, x: &V4, st: &Stencil) -> Result<Residual> {
    let (v, dv) = stencil_velocity(slices, st, x)?;
    let mut x = *x;
    x[0] = slices[st.k].t;
    let adv = (0..4).fold(V4::zeros(), |a, j| a + v[j] * dv[j]);
    let r = adv + coeffs.coeffs_at(&x)?.contract(&v, &v);
    Ok(Residual { vector: r, norm: ObserverMetric::lab().norm(&r) })
}

/// Residual of the normalized mean field, assembled as
/// `R / eta(V,V) + (1/2) (V . d log eta(V,V)) V`.
pub fn normalized_residual(slices: &[FluidSlice], coeffs: &dyn AffineConnection, x: &V4, st: &Stencil) -> Result<Residual> {
    let metric = Metric::minkowski();
    let (v, dv) = stencil_velocity(slices, st, x)?;
    let n = metric.norm_sq(&v);
    if !(n > 0.0) {
        return Err(Error::NotTimelike(n));
    }
    let r = residual(slices, coeffs, x, st)?.vector;
    // d_j log eta(V,V) = 2 eta(V, d_j V) / eta(V,V)
    let dlog: f64 = (0..4).map(|j| v[j] * 2.0 * metric.dot(&v, &dv[j]) / n).sum();
    let u = r / n + 0.5 * dlog * v;
    Ok(Residual { vector: u, norm: ObserverMetric::lab().norm(&u) })
}

/// Averaged Lorentz connection built from the kernel moments of one slice.
pub fn local_connection(field: &FaradayField, slice: &FluidSlice) -> AveragedLorentz {
    AveragedLorentz::new(field.clone(), Arc::new(slice.kernel.clone()))
}

/// Truncation estimate from doubling both stencil steps, plus a rounding term.
pub fn noise_floor(slices: &[FluidSlice], coeffs: &dyn AffineConnection, x: &V4, st: &Stencil) -> Result<f64> {
    let fine = residual(slices, coeffs, x, st)?;
    let coarse = residual(slices, coeffs, x, &Stencil { k: st.k, dt_slices: 2 * st.dt_slices, h: 2.0 * st.h })?;
    let (v, _) = stencil_velocity(slices, st, x)?;
    let dt = slices[st.k + st.dt_slices].t - slices[st.k].t;
    let step = if slices[st.k].kernel.bandwidth.is_some() { dt.min(st.h) } else { dt };
    let vn = ObserverMetric::lab().norm(&v);
    Ok(ObserverMetric::lab().norm(&(coarse.vector - fine.vector)) / 15.0 + 16.0 * f64::EPSILON * vn * vn / step)
}

/// Regular grid over a box in three coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub n: [usize; 3],
}

impl Grid3 {
    pub fn spacing(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.hi[a] - self.lo[a]) / self.n[a] as f64)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.n[1] + i[1]) * self.n[2] + i[2]
    }

    pub fn centre(&self, i: [usize; 3]) -> [f64; 3] {
        let h = self.spacing();
        std::array::from_fn(|a| self.lo[a] + (i[a] as f64 + 0.5) * h[a])
    }

    fn locate(&self, p: &[f64; 3]) -> Option<[usize; 3]> {
        let h = self.spacing();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.lo[a]) / h[a]).floor();
            if f < 0.0 {
                return None;
            }
            let i = f as usize;
            out[a] = if i == self.n[a] && p[a] <= self.hi[a] { i - 1 } else { i };
            if out[a] >= self.n[a] {
                return None;
            }
        }
        Some(out)
    }

    fn cells(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.n[0]).flat_map(move |i| (0..self.n[1]).flat_map(move |j| (0..self.n[2]).map(move |k| [i, j, k])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Zero,
    Periodic,
}

/// Cell values of a density on a grid, with a quadrature weight per cell
/// relative to the coordinate volume element.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedDensity {
    pub grid: Grid3,
    pub values: Vec<f64>,
    pub measure: Vec<f64>,
}

impl GriddedDensity {
    /// Sample `f` at the cell centres with the coordinate measure.
    pub fn from_fn(grid: Grid3, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = grid.cells().map(|i| f(grid.centre(i))).collect();
        let measure = vec![1.0; grid.len()];
        GriddedDensity { grid, values, measure }
    }

    /// Histogram of unit-normalized weights over the spatial velocity
    /// components, as a density against the invariant volume `d^3y / y^0`.
    pub fn histogram(ys: &[V4], ws: &[f64], grid: Grid3) -> Result<Self> {
        let total: f64 = ws.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Empty("histogram weights"));
        }
        let mut mass = vec![0.0; grid.len()];
        for (y, w) in ys.iter().zip(ws) {
            if let Some(i) = grid.locate(&[y[1], y[2], y[3]]) {
                mass[grid.index(i)] += w / total;
            }
        }
        let dv = grid.cell_volume();
        let measure: Vec<f64> = grid
            .cells()
            .map(|i| {
                let c = grid.centre(i);
                1.0 / (1.0 + c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
            })
            .collect();
        let values = mass.iter().zip(&measure).map(|(m, j)| m / (dv * j)).collect();
        Ok(GriddedDensity { grid, values, measure })
    }

    fn value(&self, i: [isize; 3], pad: Padding) -> f64 {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let n = self.grid.n[a] as isize;
            let k = match pad {
                Padding::Periodic => i[a].rem_euclid(n),
                Padding::Zero => {
                    if i[a] < 0 || i[a] >= n {
                        return 0.0;
                    }
                    i[a]
                }
            };
            idx[a] = k as usize;
        }
        self.values[self.grid.index(idx)]
    }

    /// Midpoint integral of `g(cell value, cell centre)`.
    pub fn integrate(&self, g: impl Fn(f64, [f64; 3]) -> f64) -> f64 {
        let dv = self.grid.cell_volume();
        self.grid
            .cells()
            .map(|i| {
                let k = self.grid.index(i);
                g(self.values[k], self.grid.centre(i)) * self.measure[k] * dv
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolevEstimate {
    pub bins: [usize; 3],
    pub l1: f64,
    pub gradient_l1: f64,
    /// `|f|_{1,1} = int |f| + sum_i int |d_i f|`.
    pub w11: f64,
}

/// `W^{1,1}` norm of a gridded density by midpoint quadrature and central differences.
pub fn sobolev_norms(f: &GriddedDensity, pad: Padding) -> SobolevEstimate {
    let g = &f.grid;
    let h = g.spacing();
    let dv = g.cell_volume();
    let mut l1 = 0.0;
    let mut grad = 0.0;
    for i in g.cells() {
        let k = g.index(i);
        let w = f.measure[k] * dv;
        l1 += f.values[k].abs() * w;
        let ii = [i[0] as isize, i[1] as isize, i[2] as isize];
        for a in 0..3 {
            let mut p = ii;
            let mut m = ii;
            p[a] += 1;
            m[a] -= 1;
            grad += ((f.value(p, pad) - f.value(m, pad)) / (2.0 * h[a])).abs() * w;
        }
    }
    SobolevEstimate { bins: g.n, l1, gradient_l1: grad, w11: l1 + grad }
}

/// `W^{0,2}` norm of a function on the grid cells.
pub fn l2_norm(f: &GriddedDensity, g: impl Fn([f64; 3]) -> f64) -> f64 {
    f.integrate(|_, c| g(c).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub value: f64,
    pub alpha: f64,
    pub vol_e: f64,
    pub vol: f64,
    pub log_delta_l2: f64,
    pub w11: f64,
    /// Sample components dropped because `|delta^k|` fell below `1e-8 alpha`.
    pub excluded: usize,
}

/// Right side `(vol_E^(1/2) / vol) sum_k |d_0 log delta^k|_{0,2} |f|_{1,1} alpha^2`
/// of the residual bound at the point `x` of slice `st.k`.
///
/// `d_0 log|delta^k| = d_0 <y>^k / delta^k` at fixed `y`. Its `L^2` norm over
/// the support is estimated as `vol_E` times the kernel-weighted sample mean
/// of its square.
///
/// `alpha` is the velocity diameter of the slice.
pub fn bound_rhs(slices: &[FluidSlice], x: &V4, st: &Stencil, bins: usize, alpha: f64) -> Result<BoundReport> {
    let (v, dv) = stencil_velocity(slices, st, x)?;
    let sl = &slices[st.k];
    let ys = sl.kernel.velocities();
    let ws = sl.kernel.weights(x);
    if alpha == 0.0 {
        return Ok(BoundReport { value: 0.0, alpha, vol_e: 0.0, vol: 1.0, log_delta_l2: 0.0, w11: 0.0, excluded: 0 });
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for y in ys {
        for a in 0..3 {
            lo[a] = lo[a].min(y[a + 1]);
            hi[a] = hi[a].max(y[a + 1]);
        }
    }
    for a in 0..3 {
        let pad = (1e-3 * alpha).max(0.5 * (hi[a] - lo[a]) / bins as f64);
        lo[a] -= pad;
        hi[a] += pad;
    }
    let grid = Grid3 { lo, hi, n: [bins; 3] };
    let f = GriddedDensity::histogram(ys, &ws, grid)?;
    let sob = sobolev_norms(&f, Padding::Zero);
    let vol_e = f.integrate(|val, _| if val > 0.0 { 1.0 } else { 0.0 });
    let vol = f.integrate(|val, _| val);
    let wsum: f64 = ws.iter().sum();
    let mut excluded = 0;
    let mut l2 = 0.0;
    for k in 0..4 {
        let mut acc = 0.0;
        let mut wk = 0.0;
        for (y, w) in ys.iter().zip(&ws) {
            let d = v[k] - y[k];
            if d.abs() < 1e-8 * alpha {
                excluded += 1;
                continue;
            }
            acc += w * (dv[0][k] / d).powi(2);
            wk += w;
        }
        if wk > 0.0 && wsum > 0.0 {
            l2 += (vol_e * acc / wk).sqrt();
        }
    }
    let value = vol_e.sqrt() / vol * l2 * sob.w11 * alpha * alpha;
    Ok(BoundReport { value, alpha, vol_e, vol, log_delta_l2: l2, w11: sob.w11, excluded })
}

/// Options of a fluid check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluidOptions {
    pub tube: TubeSpec,
    /// Lab-time spacing of the transported slices.
    pub dt: f64,
    /// Spatial stencil step in units of the kernel bandwidth.
    pub h_factor: f64,
    pub histogram_bins: usize,
    /// Coefficient of the `alpha^3` remainder allowed above the bound.
    pub remainder: f64,
}

impl Default for FluidOptions {
    fn default() -> Self {
        FluidOptions { tube: TubeSpec::default(), dt: 0.02, h_factor: 0.5, histogram_bins: 12, remainder: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidRow {
    pub t: f64,
    pub cell: usize,
    pub x: [f64; 4],
    pub v: [f64; 4],
    pub eta_vv: f64,
    pub residual_norm: f64,
    pub normalized_norm: f64,
    pub averaged_residual_norm: f64,
    pub noise_floor: f64,
    pub bound_rhs: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidReport {
    pub alpha: f64,
    pub rows: Vec<FluidRow>,
    pub max_residual: f64,
    pub max_normalized: f64,
    pub max_averaged_residual: f64,
    pub max_noise_floor: f64,
    /// Every probed residual satisfies `r <= bound + remainder * alpha^3`
    /// once ten times its own stencil noise floor is allowed for.
    pub within_bound: bool,
}

impl FluidReport {
    /// Fluid table `t, cell, x0..x3, V0..V3, eta_VV, residual_norm, bound_rhs`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "cell", "x0", "x1", "x2", "x3", "V0", "V1", "V2", "V3", "eta_VV", "residual_norm", "bound_rhs"])?;
        for r in &self.rows {
            let mut rec = vec![fmt_f64(r.t), r.cell.to_string()];
            rec.extend(r.x.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.v.iter().map(|v| fmt_f64(*v)));
            rec.extend([fmt_f64(r.eta_vv), fmt_f64(r.residual_norm), fmt_f64(r.bound_rhs)]);
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Transport `ens` with both the Vlasov and the averaged Vlasov flows, reduce
/// each to a tube of cells and probe the residuals at the given lab times.
///
/// Each probe time needs four slices on either side for the noise floor.
pub fn fluid_check(
    field: &FaradayField,
    ens: &HyperboloidEnsemble,
    probes: &[f64],
    cfg: &IntegratorConfig,
    opts: &FluidOptions,
) -> Result<FluidReport> {
    if probes.is_empty() {
        return Err(Error::Empty("probe times"));
    }
    if !(opts.dt > 0.0) || !(opts.h_factor > 0.0) || opts.histogram_bins < 2 {
        return Err(Error::invalid("fluid options", "dt, h_factor must be positive and bins at least 2"));
    }
    let t0 = ens.samples[0].x[0];
    // the initial slice fixes the kernel bandwidth
    let mut times = vec![t0];
    for &p in probes {
        if p - 4.0 * opts.dt < t0 - 1e-12 {
            return Err(Error::invalid("probe times", "each probe needs four slices before it"));
        }
        for j in -4i32..=4 {
            times.push(p + j as f64 * opts.dt);
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let lorentz = transport_ensemble(field, ens, &times, cfg)?;
    let tracers: Vec<TrajectoryState> = ens.samples.iter().map(|s| TrajectoryState::new(0.0, s.x, s.y)).collect();
    let pair = co_transport(field, ens, &tracers, &times, cfg, MomentMode::Transported)?;
    let ws: Vec<f64> = ens.samples.iter().map(|s| s.w).collect();
    let averaged = pair.tracer_series(&ws);
    let fl = mean_field(&lorentz, &opts.tube)?;
    let fa = mean_field(&averaged, &opts.tube)?;
    let alpha = diameter_of(&ens.velocities(), &ObserverMetric::lab());
    let metric = Metric::minkowski();
    let mut rep = FluidReport {
        alpha,
        rows: vec![],
        max_residual: 0.0,
        max_normalized: 0.0,
        max_averaged_residual: 0.0,
        max_noise_floor: 0.0,
        within_bound: true,
    };
    for &p in probes {
        let k = times.iter().position(|t| (t - p).abs() < 1e-12).expect("probe time is on the grid");
        let sl = &fl[k];
        let conn = local_connection(field, sl);
        let conn_a = local_connection(field, &fa[k]);
        let h = opts.h_factor * sl.kernel.bandwidth.unwrap_or(1.0);
        let st = Stencil { k, dt_slices: 1, h };
        let slice_alpha = diameter_of(sl.kernel.velocities(), &ObserverMetric::lab());
        for cell in sl.occupied() {
            let (r, n, floor, b) = match (
                residual(&fl, &conn, &cell.x, &st),
                normalized_residual(&fl, &conn, &cell.x, &st),
                noise_floor(&fl, &conn, &cell.x, &st),
                bound_rhs(&fl, &cell.x, &st, opts.histogram_bins, slice_alpha),
            ) {
                (Ok(r), Ok(n), Ok(f), Ok(b)) => (r, n, f, b),
                (Err(Error::Stencil(_)), ..) => continue,
                (Err(e), ..) | (_, Err(e), ..) | (.., Err(e), _) | (.., Err(e)) => return Err(e),
            };
            let ra = residual(&fa, &conn_a, &cell.x, &st).map(|r| r.norm).unwrap_or(f64::NAN);
            let v = cell.velocity().unwrap_or_else(V4::zeros);
            if r.norm > b.value + opts.remainder * alpha.powi(3) + 10.0 * floor {
                rep.within_bound = false;
            }
            rep.max_residual = rep.max_residual.max(r.norm);
            rep.max_normalized = rep.max_normalized.max(n.norm);
            rep.max_noise_floor = rep.max_noise_floor.max(floor);
            if ra.is_finite() {
                rep.max_averaged_residual = rep.max_averaged_residual.max(ra);
            }
            rep.rows.push(FluidRow {
                t: sl.t,
                cell: cell.index,
                x: [cell.x[0], cell.x[1], cell.x[2], cell.x[3]],
                v: [v[0], v[1], v[2], v[3]],
                eta_vv: metric.norm_sq(&v),
                residual_norm: r.norm,
                normalized_norm: n.norm,
                averaged_residual_norm: ra,
                noise_floor: floor,
                bound_rhs: b.value,
                excluded: b.excluded,
            });
        }
    }
    if rep.rows.is_empty() {
        return Err(Error::Empty("fluid probes"));
    }
    Ok(rep)
}
