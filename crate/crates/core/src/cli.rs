//! Experiment runner: a TOML configuration per run, CSV series, two-column
//! plot files and a JSON summary with sorted keys.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{compare_trajectories, run_sweep, validity_horizon, Benchmark, BoundConstants, HorizonConstants, SweepParam, SweepReport};
use crate::beamline::{averaged_offset, integrate_jacobi, principal_solutions, HillPreset, JacobiState, OffsetInputs, OffsetMode};
use crate::connections::AveragedLorentz;
use crate::distribution::{energy, fmt_f64, diameter_alpha, lift, moments, EnsembleSpec, HyperboloidEnsemble, VelocityLaw};
use crate::dynamics::{lab_grid, push_connection, push_lorentz, IntegratorConfig, MomentMode, TrajectoryState};
use crate::fields::FieldPreset;
use crate::fluid::{fluid_check, FluidOptions};
use crate::geometry::{eta_bar, Metric};
use crate::{Error, Result, V4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    /// Push one particle with the Lorentz or averaged flow.
    Simulate,
    /// Generate an ensemble and report its diameter and energy.
    Ensemble,
    /// Compare a Lorentz trajectory with its averaged counterpart.
    Compare,
    /// Fit separation exponents over alpha, E or t.
    Sweep,
    /// Probe the cold-fluid residual.
    FluidCheck,
    /// Jacobi deviation along a reference orbit and Hill principal solutions.
    Beamline,
    /// Averaged off-set along the centroid orbit.
    Offset,
    /// Validity horizon of the averaged dynamics.
    Validity,
}

impl CommandName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CommandName::Simulate => "simulate",
            CommandName::Ensemble => "ensemble",
            CommandName::Compare => "compare",
            CommandName::Sweep => "sweep",
            CommandName::FluidCheck => "fluid-check",
            CommandName::Beamline => "beamline",
            CommandName::Offset => "offset",
            CommandName::Validity => "validity",
        }
    }

    /// Names of the scalar metrics the command reports.
    pub fn metrics(&self) -> &'static [&'static str] {
        match self {
            CommandName::Simulate => &["steps", "max_shell_drift", "final_tau", "final_x0", "final_x1", "final_x2", "final_x3", "final_y0", "final_y1", "final_y2", "final_y3"],
            CommandName::Ensemble => &["n", "alpha", "energy", "mean_y0", "mean_y1", "mean_y2", "mean_y3"],
            CommandName::Compare => &[
                "max_position_separation",
                "max_velocity_separation",
                "alpha",
                "energy",
                "field_norm",
                "within_bounds",
                "theta_gap",
                "averaged_shell_drift",
                "log_energy_rate",
            ],
            CommandName::Sweep => &["position_slope", "position_r2", "velocity_slope", "velocity_r2"],
            CommandName::FluidCheck => &["alpha", "max_residual", "max_normalized", "max_averaged_residual", "max_noise_floor", "within_bound"],
            CommandName::Beamline => &["final_xi0", "final_xi1", "final_xi2", "final_xi3", "final_xip0", "final_xip1", "final_xip2", "final_xip3", "wronskian_drift"],
            CommandName::Offset => &["max_abs_offset", "final_off1", "final_off3"],
            CommandName::Validity => &["t_max_position", "t_max_velocity", "l_max", "weak"],
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "beamgeom", version, about = "Lorentz-force and averaged beam dynamics experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandName,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for stochastic generators, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for ensemble work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the resolved plan and exit without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleKind {
    Delta,
    Cap,
    Disk,
    Gaussian,
}

/// Ensemble generator addressed by its target diameter and energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub kind: EnsembleKind,
    /// Target `inf y^0`; the central boost has `cosh r0 = energy`.
    pub energy: f64,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub cutoff: Option<f64>,
    #[serde(default = "one")]
    pub n: usize,
    pub seed: Option<u64>,
    #[serde(default)]
    pub position_sigma: f64,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default = "two")]
    pub axis: usize,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl EnsembleConfig {
    pub fn spec(&self) -> Result<EnsembleSpec> {
        if !(self.energy >= 1.0) {
            return Err(Error::Config(format!("ensemble.energy must be at least 1, got {}", self.energy)));
        }
        if self.axis < 1 || self.axis > 3 {
            return Err(Error::Config(format!("ensemble.axis must be 1, 2 or 3, got {}", self.axis)));
        }
        if self.n == 0 {
            return Err(Error::Config("ensemble.n must be positive".into()));
        }
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Config(format!("ensemble.{name} is required for kind {:?}", self.kind)));
        let seed = match (self.kind, self.seed) {
            (EnsembleKind::Delta, s) => s.unwrap_or(0),
            (_, Some(s)) => s,
            (_, None) => return Err(Error::Config("ensemble.seed is required for stochastic generators".into())),
        };
        let mut spec = match self.kind {
            EnsembleKind::Delta => EnsembleSpec::new(VelocityLaw::Delta, self.energy.acosh(), self.n, seed),
            EnsembleKind::Cap | EnsembleKind::Disk => {
                let alpha = need(self.alpha, "alpha")?;
                if !(alpha > 0.0) {
                    return Err(Error::Config(format!("ensemble.alpha must be positive, got {alpha}")));
                }
                Benchmark { n: self.n, seed, transverse: self.kind == EnsembleKind::Disk }.spec(alpha, self.energy)
            }
            EnsembleKind::Gaussian => {
                let law = VelocityLaw::TruncatedGaussian { sigma: need(self.sigma, "sigma")?, cutoff: need(self.cutoff, "cutoff")? };
                EnsembleSpec::new(law, self.energy.acosh(), self.n, seed)
            }
        };
        spec.axis = self.axis;
        spec.position_sigma = self.position_sigma;
        spec.antithetic = self.antithetic;
        Ok(spec)
    }
}

/// Lab-time window and output spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanConfig {
    pub t1: f64,
    #[serde(default = "unit")]
    pub dt: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    Lorentz,
    Averaged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub x: [f64; 4],
    /// Spatial velocity; the time component is fixed by the shell.
    pub u: [f64; 3],
    /// Proper-time span.
    pub tau: f64,
    #[serde(default = "lorentz_flow")]
    pub flow: FlowKind,
}

fn lorentz_flow() -> FlowKind {
    FlowKind::Lorentz
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub x: [f64; 4],
    pub u: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default)]
    pub frozen_moments: bool,
    #[serde(default)]
    pub constants: BoundConstants,
    pub init: Option<InitConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub alpha: f64,
    pub energy: f64,
    pub t: f64,
    pub n: usize,
    pub seed: Option<u64>,
    #[serde(default = "yes")]
    pub transverse: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    pub probes: Vec<f64>,
    #[serde(default)]
    pub options: FluidOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamlineConfig {
    /// Proper-time length of the reference orbit.
    pub tau: f64,
    #[serde(default)]
    pub xi: [f64; 4],
    #[serde(default)]
    pub xip: [f64; 4],
    /// Difference step for the coefficient derivatives.
    #[serde(default = "fd_step")]
    pub h: f64,
    pub hill: Option<HillPreset>,
}

fn fd_step() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetConfig {
    #[serde(default = "full_mode")]
    pub mode: OffsetMode,
    #[serde(default = "fd_step")]
    pub h: f64,
}

fn full_mode() -> OffsetMode {
    OffsetMode::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidityConfig {
    pub e0: f64,
    pub alpha: f64,
    pub field_norm: f64,
    pub l_max_geom: f64,
    pub beam_length: f64,
    #[serde(default)]
    pub constants: HorizonConstants,
}

/// A bound on one reported metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub metric: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<CommandName>,
    pub out: Option<PathBuf>,
    pub field: Option<FieldPreset>,
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    pub span: Option<SpanConfig>,
    pub simulate: Option<SimulateConfig>,
    pub compare: Option<CompareConfig>,
    pub sweep: Option<SweepConfig>,
    pub fluid: Option<FluidConfig>,
    pub beamline: Option<BeamlineConfig>,
    pub offset: Option<OffsetConfig>,
    pub validity: Option<ValidityConfig>,
    #[serde(default)]
    pub assert: Vec<Assertion>,
}

fn require<'a, T>(v: &'a Option<T>, section: &str, cmd: CommandName) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("[{section}] is required by {}", cmd.as_str())))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply command-line overrides and check every section the command uses.
    pub fn resolve(mut self, cmd: CommandName, seed: Option<u64>) -> Result<Self> {
        if let Some(c) = self.command {
            if c != cmd {
                return Err(Error::Config(format!("configuration is for {}, not {}", c.as_str(), cmd.as_str())));
            }
        }
        self.command = Some(cmd);
        if let Some(s) = seed {
            if let Some(e) = self.ensemble.as_mut() {
                e.seed = Some(s);
            }
            if let Some(sw) = self.sweep.as_mut() {
                sw.seed = Some(s);
            }
        }
        self.integrator.validate().map_err(|e| Error::Config(e.to_string()))?;
        for a in &self.assert {
            if !cmd.metrics().contains(&a.metric.as_str()) {
                return Err(Error::Config(format!("{} does not report a metric named {}", cmd.as_str(), a.metric)));
            }
            if a.min.is_none() && a.max.is_none() {
                return Err(Error::Config(format!("assertion on {} needs min or max", a.metric)));
            }
        }
        let span_ok = |s: &SpanConfig| -> Result<()> {
            if !(s.t1 > 0.0 && s.dt > 0.0) {
                return Err(Error::Config("span.t1 and span.dt must be positive".into()));
            }
            Ok(())
        };
        match cmd {
            CommandName::Simulate => {
                require(&self.field, "field", cmd)?;
                let s = require(&self.simulate, "simulate", cmd)?;
                if !(s.tau > 0.0) {
                    return Err(Error::Config("simulate.tau must be positive".into()));
                }
                if s.flow == FlowKind::Averaged {
                    require(&self.ensemble, "ensemble", cmd)?.spec()?;
                }
            }
            CommandName::Ensemble => {
                require(&self.ensemble, "ensemble", cmd)?.spec()?;
            }
            CommandName::Compare | CommandName::Offset => {
                require(&self.field, "field", cmd)?;
                require(&self.ensemble, "ensemble", cmd)?.spec()?;
                span_ok(require(&self.span, "span", cmd)?)?;
            }
            CommandName::Sweep => {
                require(&self.field, "field", cmd)?;
                let s = require(&self.sweep, "sweep", cmd)?;
                if s.seed.is_none() {
                    return Err(Error::Config("sweep.seed is required".into()));
                }
                if s.values.len() < 4 {
                    return Err(Error::Config("sweep.values needs at least four points".into()));
                }
            }
            CommandName::FluidCheck => {
                require(&self.field, "field", cmd)?;
                require(&self.ensemble, "ensemble", cmd)?.spec()?;
                if require(&self.fluid, "fluid", cmd)?.probes.is_empty() {
                    return Err(Error::Config("fluid.probes must not be empty".into()));
                }
            }
            CommandName::Beamline => {
                require(&self.field, "field", cmd)?;
                require(&self.ensemble, "ensemble", cmd)?.spec()?;
                let b = require(&self.beamline, "beamline", cmd)?;
                if !(b.tau > 0.0 && b.h > 0.0) {
                    return Err(Error::Config("beamline.tau and beamline.h must be positive".into()));
                }
            }
            CommandName::Validity => {
                require(&self.validity, "validity", cmd)?;
            }
        }
        Ok(self)
    }
}

/// One two-column series for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

impl PlotSeries {
    pub fn new(name: &str, x_label: &str, y_label: &str, points: Vec<(f64, f64)>) -> Self {
        PlotSeries { name: name.into(), x_label: x_label.into(), y_label: y_label.into(), points }
    }
}

/// Write `<name>.dat` per series: a `# x y` header then whitespace-separated
/// columns. Returns the file names.
pub fn emit_plot_data(series: &[PlotSeries], dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for s in series {
        let file = format!("{}.dat", s.name);
        let mut out = format!("# {} {}\n", s.x_label, s.y_label);
        for (x, y) in &s.points {
            out.push_str(&format!("{} {}\n", fmt_f64(*x), fmt_f64(*y)));
        }
        fs::write(dir.join(&file), out)?;
        names.push(file);
    }
    Ok(names)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionResult {
    pub metric: String,
    pub value: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub command: String,
    pub config: ExperimentConfig,
    pub metrics: BTreeMap<String, f64>,
    pub assertions: Vec<AssertionResult>,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

impl Summary {
    /// Pretty JSON with every object's keys sorted.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self).map_err(|e| Error::Io(e.to_string()))?;
        serde_json::to_string_pretty(&v).map(|s| s + "\n").map_err(|e| Error::Io(e.to_string()))
    }
}

struct Artifacts {
    metrics: BTreeMap<String, f64>,
    files: Vec<String>,
    warnings: Vec<String>,
}

impl Artifacts {
    fn new() -> Self {
        Artifacts { metrics: BTreeMap::new(), files: Vec::new(), warnings: Vec::new() }
    }

    fn metric(&mut self, k: &str, v: f64) {
        self.metrics.insert(k.to_string(), v);
    }

    fn flag(&mut self, k: &str, v: bool) {
        self.metric(k, if v { 1.0 } else { 0.0 });
    }

    fn csv(&mut self, dir: &Path, name: &str, write: impl FnOnce(fs::File) -> Result<()>) -> Result<()> {
        write(fs::File::create(dir.join(name))?)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn plots(&mut self, dir: &Path, series: &[PlotSeries]) -> Result<()> {
        self.files.extend(emit_plot_data(series, dir)?);
        Ok(())
    }
}

fn spatial(u: &[f64; 3]) -> V4 {
    lift(u)
}

fn centroid_start(ens: &HyperboloidEnsemble) -> Result<TrajectoryState> {
    let m = moments(ens)?;
    let n = Metric::minkowski().norm_sq(&m.mean);
    if !(n > 0.0) {
        return Err(Error::NotTimelike(n));
    }
    let w = ens.total_weight();
    let c = ens.samples.iter().fold(V4::zeros(), |a, s| a + s.w * s.x) / w;
    Ok(TrajectoryState::new(0.0, c, m.mean / n.sqrt()))
}

fn execute(cfg: &ExperimentConfig, cmd: CommandName, dir: &Path) -> Result<Artifacts> {
    let mut art = Artifacts::new();
    let ic = &cfg.integrator;
    let field = || cfg.field.as_ref().map(|f| f.build()).expect("checked by resolve");
    let ensemble = || -> Result<HyperboloidEnsemble> { cfg.ensemble.as_ref().expect("checked by resolve").spec()?.generate() };
    match cmd {
        CommandName::Simulate => {
            let s = cfg.simulate.as_ref().expect("checked by resolve");
            let f = field();
            let init = TrajectoryState::new(0.0, V4::from(s.x), spatial(&s.u));
            let rec = match s.flow {
                FlowKind::Lorentz => push_lorentz(&f, &init, (0.0, s.tau), ic)?,
                FlowKind::Averaged => {
                    let conn = AveragedLorentz::frozen(f, moments(&ensemble()?)?);
                    push_connection(&conn, &init, (0.0, s.tau), ic)?
                }
            };
            art.csv(dir, "trajectory.csv", |w| rec.write_csv(w))?;
            let series: Vec<PlotSeries> = (1..4)
                .map(|k| PlotSeries::new(&format!("x{k}"), "tau", &format!("x{k}"), rec.states.iter().map(|st| (st.s, st.x[k])).collect()))
                .collect();
            art.plots(dir, &series)?;
            let last = rec.last();
            art.metric("steps", rec.steps as f64);
            art.metric("max_shell_drift", rec.max_drift);
            art.metric("final_tau", last.s);
            for k in 0..4 {
                art.metric(&format!("final_x{k}"), last.x[k]);
                art.metric(&format!("final_y{k}"), last.y[k]);
            }
        }
        CommandName::Ensemble => {
            let ens = ensemble()?;
            art.csv(dir, "ensemble.csv", |w| ens.write_csv(w))?;
            let bar = eta_bar(&Metric::minkowski(), &ens.observer)?;
            let m = moments(&ens)?;
            art.metric("n", ens.len() as f64);
            art.metric("alpha", diameter_alpha(&ens, &bar));
            art.metric("energy", energy(&ens));
            for k in 0..4 {
                art.metric(&format!("mean_y{k}"), m.mean[k]);
            }
        }
        CommandName::Compare => {
            let span = cfg.span.as_ref().expect("checked by resolve");
            let cc = cfg.compare.clone().unwrap_or_default();
            let ens = ensemble()?;
            let init = cc.init.as_ref().map(|i| TrajectoryState::new(0.0, V4::from(i.x), spatial(&i.u)));
            let mode = if cc.frozen_moments { MomentMode::Frozen } else { MomentMode::Transported };
            let t0 = ens.samples[0].x[0];
            let rep = compare_trajectories(&field(), &ens, init, &lab_grid(t0, t0 + span.t1, span.dt), ic, &cc.constants, mode)?;
            art.csv(dir, "comparison.csv", |w| rep.write_csv(w))?;
            let zip = |ys: &[f64]| rep.times.iter().cloned().zip(ys.iter().cloned()).collect::<Vec<_>>();
            art.plots(
                dir,
                &[
                    PlotSeries::new("position_separation", "t", "position_separation", zip(&rep.position_separation)),
                    PlotSeries::new("velocity_separation", "t", "velocity_separation", zip(&rep.velocity_separation)),
                ],
            )?;
            art.metric("max_position_separation", rep.max_position_separation());
            art.metric("max_velocity_separation", rep.max_velocity_separation());
            art.metric("alpha", rep.alpha);
            art.metric("energy", rep.energy);
            art.metric("field_norm", rep.field_norm);
            art.flag("within_bounds", rep.within_bounds);
            art.metric("theta_gap", rep.theta_gap);
            art.metric("averaged_shell_drift", rep.averaged_shell_drift);
            art.metric("log_energy_rate", rep.log_energy_rate);
            art.warnings.extend(rep.warnings.iter().cloned());
        }
        CommandName::Sweep => {
            let s = cfg.sweep.as_ref().expect("checked by resolve");
            let bench = Benchmark { n: s.n, seed: s.seed.expect("checked by resolve"), transverse: s.transverse };
            let rep = run_sweep(&field(), &bench, s.param, &s.values, s.alpha, s.energy, s.t, ic)?;
            art.csv(dir, "sweep.csv", |w| write_sweep_csv(&rep, w))?;
            let logs = |pts: &[(f64, f64)]| pts.iter().map(|(x, y)| (x.ln(), y.ln())).collect::<Vec<_>>();
            let name = rep.param.name();
            art.plots(
                dir,
                &[
                    PlotSeries::new("position_loglog", &format!("ln_{name}"), "ln_position_separation", logs(&rep.position_fit.points)),
                    PlotSeries::new("velocity_loglog", &format!("ln_{name}"), "ln_velocity_separation", logs(&rep.velocity_fit.points)),
                ],
            )?;
            art.metric("position_slope", rep.position_fit.slope);
            art.metric("position_r2", rep.position_fit.r2);
            art.metric("velocity_slope", rep.velocity_fit.slope);
            art.metric("velocity_r2", rep.velocity_fit.r2);
        }
        CommandName::FluidCheck => {
            let fc = cfg.fluid.as_ref().expect("checked by resolve");
            let rep = fluid_check(&field(), &ensemble()?, &fc.probes, ic, &fc.options)?;
            art.csv(dir, "fluid.csv", |w| rep.write_csv(w))?;
            let mut per_t: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
            for r in &rep.rows {
                let e = per_t.entry(r.t.to_bits()).or_insert((r.t, 0.0));
                e.1 = e.1.max(r.residual_norm);
            }
            art.plots(dir, &[PlotSeries::new("residual", "t", "max_residual_norm", per_t.into_values().collect())])?;
            art.metric("alpha", rep.alpha);
            art.metric("max_residual", rep.max_residual);
            art.metric("max_normalized", rep.max_normalized);
            art.metric("max_averaged_residual", rep.max_averaged_residual);
            art.metric("max_noise_floor", rep.max_noise_floor);
            art.flag("within_bound", rep.within_bound);
        }
        CommandName::Beamline => {
            let b = cfg.beamline.as_ref().expect("checked by resolve");
            let ens = ensemble()?;
            let conn = AveragedLorentz::frozen(field(), moments(&ens)?);
            let start = centroid_start(&ens)?;
            let reference = push_connection(&conn, &start, (0.0, b.tau), ic)?;
            let init = JacobiState::new(0.0, V4::from(b.xi), V4::from(b.xip));
            let rec = integrate_jacobi(&conn, &reference, &init, (0.0, b.tau), ic, b.h)?;
            art.csv(dir, "beamline.csv", |w| rec.write_csv(w))?;
            let series: Vec<PlotSeries> = [1, 3]
                .iter()
                .map(|&k| PlotSeries::new(&format!("xi{k}"), "tau", &format!("xi{k}"), rec.states.iter().map(|s| (s.tau, s.xi[k])).collect()))
                .collect();
            art.plots(dir, &series)?;
            let last = rec.last();
            for k in 0..4 {
                art.metric(&format!("final_xi{k}"), last.xi[k]);
                art.metric(&format!("final_xip{k}"), last.xip[k]);
            }
            let mut drift = 0.0f64;
            if let Some(h) = &b.hill {
                let mut rows = Vec::new();
                for (comp, sys) in h.systems()? {
                    let ps = principal_solutions(&sys, (0.0, b.tau), ic)?;
                    for i in 0..ps.tau.len() {
                        drift = drift.max((ps.wronskian(i) - 1.0).abs());
                        rows.push([comp.to_string(), fmt_f64(ps.tau[i]), fmt_f64(ps.c[i]), fmt_f64(ps.cp[i]), fmt_f64(ps.s[i]), fmt_f64(ps.sp[i])]);
                    }
                }
                art.csv(dir, "hill.csv", |w| {
                    let mut wr = csv::Writer::from_writer(w);
                    wr.write_record(["component", "tau", "C", "Cp", "S", "Sp"])?;
                    for r in &rows {
                        wr.write_record(r)?;
                    }
                    wr.flush()?;
                    Ok(())
                })?;
            }
            art.metric("wronskian_drift", drift);
        }
        CommandName::Offset => {
            let span = cfg.span.as_ref().expect("checked by resolve");
            let oc = cfg.offset.clone().unwrap_or(OffsetConfig { mode: OffsetMode::Full, h: fd_step() });
            let f = field();
            let ens = ensemble()?;
            let t0 = ens.samples[0].x[0];
            let inp = OffsetInputs::from_transport(&f, &ens, t0 + span.t1, span.dt, ic)?;
            let rep = averaged_offset(&f, &inp, oc.mode, oc.h)?;
            art.csv(dir, "offset.csv", |w| rep.write_csv(w))?;
            let zip = |ys: &[f64]| rep.tau.iter().cloned().zip(ys.iter().cloned()).collect::<Vec<_>>();
            art.plots(dir, &[PlotSeries::new("off1", "tau", "off1", zip(&rep.off1)), PlotSeries::new("off3", "tau", "off3", zip(&rep.off3))])?;
            art.metric("max_abs_offset", rep.max_abs());
            art.metric("final_off1", *rep.off1.last().unwrap_or(&0.0));
            art.metric("final_off3", *rep.off3.last().unwrap_or(&0.0));
        }
        CommandName::Validity => {
            let v = cfg.validity.as_ref().expect("checked by resolve");
            let rep = validity_horizon(v.e0, v.alpha, v.field_norm, v.l_max_geom, v.beam_length, &v.constants)?;
            art.metric("t_max_position", rep.t_max_position);
            art.metric("t_max_velocity", rep.t_max_velocity);
            art.metric("l_max", rep.l_max);
            art.flag("weak", rep.weak);
        }
    }
    Ok(art)
}

fn write_sweep_csv<W: Write>(rep: &SweepReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["alpha", "energy", "t", "position_separation", "velocity_separation"])?;
    for p in &rep.points {
        wr.write_record([fmt_f64(p.alpha), fmt_f64(p.energy), fmt_f64(p.t), fmt_f64(p.position_separation), fmt_f64(p.velocity_separation)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Result of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Planned(String),
    Finished(Summary),
}

/// Load, validate and execute an experiment.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text)?.resolve(cli.command, cli.seed)?;
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("beamgeom-out"));
    if let Some(0) = cli.threads {
        return Err(Error::Config("--threads must be positive".into()));
    }
    let mut shown = cfg.clone();
    shown.out = None;
    if cli.dry_run {
        let plan = serde_json::json!({
            "command": cli.command.as_str(),
            "config": serde_json::to_value(&shown).map_err(|e| Error::Io(e.to_string()))?,
            "metrics": cli.command.metrics(),
            "out": out.display().to_string(),
            "threads": cli.threads,
        });
        return Ok(Outcome::Planned(serde_json::to_string_pretty(&plan).map_err(|e| Error::Io(e.to_string()))? + "\n"));
    }
    fs::create_dir_all(&out)?;
    let go = || execute(&cfg, cli.command, &out);
    let art = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::Config(e.to_string()))?.install(go)?,
        None => go()?,
    };
    let assertions: Vec<AssertionResult> = cfg
        .assert
        .iter()
        .map(|a| {
            let value = art.metrics.get(&a.metric).copied().unwrap_or(f64::NAN);
            let pass = value.is_finite() && a.min.map_or(true, |m| value >= m) && a.max.map_or(true, |m| value <= m);
            AssertionResult { metric: a.metric.clone(), value, min: a.min, max: a.max, pass }
        })
        .collect();
    let mut files = art.files;
    files.push("summary.json".into());
    let summary = Summary {
        command: cli.command.as_str().into(),
        config: shown,
        metrics: art.metrics,
        pass: assertions.iter().all(|a| a.pass),
        assertions,
        files,
        warnings: art.warnings,
    };
    fs::write(out.join("summary.json"), summary.to_json()?)?;
    Ok(Outcome::Finished(summary))
}

/// Exit status: 0 when every assertion holds, 4 when one fails, otherwise
/// the error's code.
pub fn main_with(cli: Cli) -> i32 {
    match run(&cli) {
        Ok(Outcome::Planned(p)) => {
            print!("{p}");
            0
        }
        Ok(Outcome::Finished(s)) => {
            for a in s.assertions.iter().filter(|a| !a.pass) {
                eprintln!("assertion failed: {} = {} (min {:?}, max {:?})", a.metric, a.value, a.min, a.max);
            }
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            if s.pass {
                0
            } else {
                4
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(cmd: CommandName, config: &Path, out: &Path) -> Cli {
        Cli { command: cmd, config: Some(config.into()), out: Some(out.into()), seed: None, threads: None, dry_run: false }
    }

    fn write_cfg(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        fs::write(&p, text).unwrap();
        p
    }

    fn fixture() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/delta_compare.toml")
    }

    #[test]
    fn delta_fixture_compares_to_zero() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cli(CommandName::Compare, &fixture(), tmp.path());
        let Outcome::Finished(s) = run(&c).unwrap() else { panic!() };
        assert!(s.metrics["max_position_separation"] < 1e-9);
        assert!(s.pass);
        assert_eq!(main_with(c), 0);
        let head = fs::read_to_string(tmp.path().join("position_separation.dat")).unwrap();
        assert!(head.starts_with("# t position_separation\n0 0\n"));
    }

    #[test]
    fn schema_violations_exit_2() {
        let tmp = tempfile::tempdir().unwrap();
        let cases = [
            "bogus = 1\n",
            "[validity]\ne0 = 1\nalpha = 1\nfield_norm = 1\nl_max_geom = 1\nbeam_length = 1\nextra = 2\n",
            "[field]\nkind = \"normal-dipole\"\nb0 = 1\n[ensemble]\nkind = \"cap\"\nenergy = 10\nalpha = 0.1\nn = 10\n[span]\nt1 = 1\n",
            "command = \"sweep\"\n",
            "[validity]\ne0 = 1\nalpha = 1\nfield_norm = 1\nl_max_geom = 1\nbeam_length = 1\n[[assert]]\nmetric = \"nope\"\nmax = 1\n",
        ];
        for text in cases {
            let p = write_cfg(tmp.path(), text);
            let c = cli(if text.contains("ensemble") { CommandName::Compare } else { CommandName::Validity }, &p, tmp.path());
            let err = run(&c).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn validity_summary_and_assertions() {
        let tmp = tempfile::tempdir().unwrap();
        let text = "[validity]\ne0 = 100\nalpha = 0.01\nfield_norm = 1\nl_max_geom = 1\nbeam_length = 1\n[validity.constants]\nk = 1\n\
                    [[assert]]\nmetric = \"t_max_velocity\"\nmax = 1.0\n";
        let p = write_cfg(tmp.path(), text);
        let c = cli(CommandName::Validity, &p, tmp.path());
        let Outcome::Finished(s) = run(&c).unwrap() else { panic!() };
        assert_eq!(s.metrics["t_max_velocity"], 1e4);
        assert!(!s.pass);
        assert_eq!(main_with(c), 4);
        let json = fs::read_to_string(tmp.path().join("summary.json")).unwrap();
        assert!(json.find("\"assertions\"").unwrap() < json.find("\"command\"").unwrap());
    }

    #[test]
    fn dry_run_writes_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let mut c = cli(CommandName::Compare, &fixture(), &out);
        c.dry_run = true;
        let Outcome::Planned(p) = run(&c).unwrap() else { panic!() };
        assert!(p.contains("\"normal-dipole\""));
        assert!(!out.exists());
    }

    #[test]
    fn empty_series_gives_header_only() {
        let tmp = tempfile::tempdir().unwrap();
        let names = emit_plot_data(&[PlotSeries::new("empty", "t", "y", vec![])], tmp.path()).unwrap();
        assert_eq!(names, vec!["empty.dat"]);
        assert_eq!(fs::read_to_string(tmp.path().join("empty.dat")).unwrap(), "# t y\n");
    }

    #[test]
    fn reruns_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let text = "[field]\nkind = \"normal-dipole\"\nb0 = 1\n[integrator]\nstep = 0.01\n\
                    [sweep]\nparam = \"alpha\"\nvalues = [0.01, 0.02, 0.04, 0.08]\nalpha = 0.02\nenergy = 10\nt = 0.5\nn = 64\n";
        let p = write_cfg(tmp.path(), text);
        let mut bytes = Vec::new();
        for (k, threads) in [None, Some(1), Some(2)].into_iter().enumerate() {
            let out = tmp.path().join(format!("o{k}"));
            let mut c = cli(CommandName::Sweep, &p, &out);
            c.seed = Some(11);
            c.threads = threads;
            let Outcome::Finished(s) = run(&c).unwrap() else { panic!() };
            assert!(s.metrics["position_r2"].is_finite());
            let files: Vec<Vec<u8>> = s.files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
            bytes.push(files);
        }
        assert_eq!(bytes[0], bytes[1]);
        assert_eq!(bytes[0], bytes[2]);
        let missing_seed = cli(CommandName::Sweep, &p, tmp.path());
        assert_eq!(run(&missing_seed).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn every_command_runs_on_small_inputs() {
        let tmp = tempfile::tempdir().unwrap();
        let base = "[field]\nkind = \"normal-quad-dipole\"\nb0 = 1\nb1 = 0.5\n[integrator]\nstep = 0.005\n\
                    [ensemble]\nkind = \"cap\"\nenergy = 10\nalpha = 0.05\nn = 64\nseed = 3\n[span]\nt1 = 1\ndt = 0.1\n";
        let extra = [
            (CommandName::Simulate, "[simulate]\nu = [0, 3, 0]\ntau = 1\n"),
            (CommandName::Ensemble, ""),
            (CommandName::Compare, "[compare]\nfrozen_moments = true\n"),
            (CommandName::Offset, "[offset]\nmode = \"frozen\"\n"),
            (CommandName::Beamline, "[beamline]\ntau = 1\nxi = [0, 1e-3, 0, 1e-3]\n[beamline.hill]\nkind = \"quad-dipole\"\nb1 = 0.5\nrho = 3\n"),
            (
                CommandName::FluidCheck,
                "[fluid]\nprobes = [0.1]\n[fluid.options]\ndt = 0.01\n",
            ),
        ];
        for (cmd, more) in extra {
            let p = write_cfg(tmp.path(), &format!("{base}{more}"));
            let out = tmp.path().join(cmd.as_str());
            let Outcome::Finished(s) = run(&cli(cmd, &p, &out)).unwrap() else { panic!() };
            for k in cmd.metrics() {
                assert!(s.metrics.contains_key(*k), "{}: {k}", cmd.as_str());
            }
            for f in &s.files {
                assert!(out.join(f).exists(), "{f}");
            }
        }
    }
}
