//! External electromagnetic fields given as Faraday 2-forms.
//!
//! Lowered components follow
//! `F = [[0, E1, E2, E3], [-E1, 0, -B3, B2], [-E2, B3, 0, -B1], [-E3, -B2, B1, 0]]`
//! and the particle push is `dy/dtau = F^i_j y^j` with `F^i_j = eta^ik F_kj`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{op_norm, Metric, ObserverMetric};
use crate::{Error, Result, M4, V4};

/// Default central-difference step for field derivatives.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

type FieldFn = Arc<dyn Fn(&V4) -> M4 + Send + Sync>;
type GradFn = Arc<dyn Fn(&V4) -> [M4; 4] + Send + Sync>;
type DomainFn = Arc<dyn Fn(&V4) -> bool + Send + Sync>;

/// Antisymmetric matrix from its upper-triangle entries.
pub fn antisym(entries: &[(usize, usize, f64)]) -> M4 {
    let mut m = M4::zeros();
    for &(i, j, v) in entries {
        m[(i, j)] += v;
        m[(j, i)] -= v;
    }
    m
}

/// Faraday tensor field on spacetime.
#[derive(Clone)]
pub struct FaradayField {
    pub name: String,
    lowered: FieldFn,
    grad: Option<GradFn>,
    domain: Option<DomainFn>,
    metric: Metric,
    fd_step: f64,
}

impl fmt::Debug for FaradayField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FaradayField")
            .field("name", &self.name)
            .field("analytic_gradient", &self.grad.is_some())
            .finish()
    }
}

impl FaradayField {
    /// Field from an evaluator of the lowered components.
    pub fn from_fn(name: impl Into<String>, f: impl Fn(&V4) -> M4 + Send + Sync + 'static) -> Self {
        FaradayField {
            name: name.into(),
            lowered: Arc::new(f),
            grad: None,
            domain: None,
            metric: Metric::minkowski(),
            fd_step: DEFAULT_FD_STEP,
        }
    }

    /// Attach analytic derivatives `g[l] = d_l F_ij`.
    pub fn with_gradient(mut self, g: impl Fn(&V4) -> [M4; 4] + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(g));
        self
    }

    pub fn with_domain(mut self, d: impl Fn(&V4) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Some(Arc::new(d));
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.grad.is_some()
    }

    /// Multiply the field by a charge `q`; the push then reads `dy/dtau = q F y`.
    pub fn scaled(&self, q: f64) -> Self {
        let f = self.lowered.clone();
        let mut out = self.clone();
        out.name = format!("{}*{}", q, self.name);
        out.lowered = Arc::new(move |x| q * f(x));
        if let Some(g) = self.grad.clone() {
            out.grad = Some(Arc::new(move |x| g(x).map(|m| q * m)));
        }
        out
    }

    /// Sum of two fields.
    pub fn sum(&self, other: &FaradayField) -> Self {
        let (a, b) = (self.lowered.clone(), other.lowered.clone());
        let mut out = FaradayField::from_fn(format!("{}+{}", self.name, other.name), move |x| a(x) + b(x));
        if let (Some(ga), Some(gb)) = (self.grad.clone(), other.grad.clone()) {
            out.grad = Some(Arc::new(move |x| {
                let (p, q) = (ga(x), gb(x));
                [p[0] + q[0], p[1] + q[1], p[2] + q[2], p[3] + q[3]]
            }));
        }
        out
    }

    pub fn in_domain(&self, x: &V4) -> bool {
        self.domain.as_ref().map_or(true, |d| d(x))
    }

    /// Lowered components `F_ij(x)` without a domain check.
    #[inline]
    pub fn lowered(&self, x: &V4) -> M4 {
        (self.lowered)(x)
    }

    /// Mixed components `F^i_j(x) = eta^ik F_kj(x)`.
    #[inline]
    pub fn mixed(&self, x: &V4) -> M4 {
        raise_first(&self.metric, &self.lowered(x))
    }

    /// Lowered and mixed components with a domain check.
    pub fn eval(&self, x: &V4) -> Result<(M4, M4)> {
        if !self.in_domain(x) {
            return Err(Error::invalid("x", format!("outside the domain of field {}", self.name)));
        }
        let f = self.lowered(x);
        Ok((f, raise_first(&self.metric, &f)))
    }

    /// `d_l F_ij`, analytic when available and central differences otherwise.
    pub fn d_lowered(&self, x: &V4, l: usize) -> M4 {
        if let Some(g) = &self.grad {
            return g(x)[l];
        }
        central_diff(|p| self.lowered(p), x, l, self.fd_step)
    }

    /// `d_l F^i_j`.
    pub fn d_mixed(&self, x: &V4, l: usize) -> M4 {
        raise_first(&self.metric, &self.d_lowered(x, l))
    }
}

fn raise_first(metric: &Metric, f: &M4) -> M4 {
    if metric.flat {
        let mut m = *f;
        for j in 0..4 {
            m[(1, j)] = -m[(1, j)];
            m[(2, j)] = -m[(2, j)];
            m[(3, j)] = -m[(3, j)];
        }
        m
    } else {
        metric.inverse() * f
    }
}

fn central_diff(f: impl Fn(&V4) -> M4, x: &V4, l: usize, h: f64) -> M4 {
    let mut xp = *x;
    let mut xm = *x;
    xp[l] += h;
    xm[l] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Named accelerator and textbook field configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldPreset {
    Zero,
    ConstantE { e: [f64; 3] },
    ConstantB { b: [f64; 3] },
    NormalDipole { b0: f64 },
    SkewDipole { b0: f64 },
    NormalQuadDipole { b0: f64, b1: f64 },
    Quad45Dipole { b0: f64, b1: f64 },
    LongitudinalE { e2: f64 },
    RfCavity { e2_0: f64, w_rf: f64 },
}

impl FieldPreset {
    pub fn name(&self) -> &'static str {
        match self {
            FieldPreset::Zero => "zero",
            FieldPreset::ConstantE { .. } => "constant-e",
            FieldPreset::ConstantB { .. } => "constant-b",
            FieldPreset::NormalDipole { .. } => "normal-dipole",
            FieldPreset::SkewDipole { .. } => "skew-dipole",
            FieldPreset::NormalQuadDipole { .. } => "normal-quad-dipole",
            FieldPreset::Quad45Dipole { .. } => "quad45-dipole",
            FieldPreset::LongitudinalE { .. } => "longitudinal-e",
            FieldPreset::RfCavity { .. } => "rf-cavity",
        }
    }

    pub fn build(&self) -> FaradayField {
        let zero_grad = |_: &V4| [M4::zeros(); 4];
        match *self {
            FieldPreset::Zero => FaradayField::from_fn("zero", |_| M4::zeros()).with_gradient(zero_grad),
            FieldPreset::ConstantE { e } => {
                let m = antisym(&[(0, 1, e[0]), (0, 2, e[1]), (0, 3, e[2])]);
                FaradayField::from_fn("constant-e", move |_| m).with_gradient(zero_grad)
            }
            FieldPreset::ConstantB { b } => {
                let m = antisym(&[(1, 2, -b[2]), (1, 3, b[1]), (2, 3, -b[0])]);
                FaradayField::from_fn("constant-b", move |_| m).with_gradient(zero_grad)
            }
            FieldPreset::NormalDipole { b0 } => {
                let m = antisym(&[(1, 2, b0)]);
                FaradayField::from_fn("normal-dipole", move |_| m).with_gradient(zero_grad)
            }
            FieldPreset::SkewDipole { b0 } => {
                let m = antisym(&[(1, 2, -b0)]);
                FaradayField::from_fn("skew-dipole", move |_| m).with_gradient(zero_grad)
            }
            FieldPreset::NormalQuadDipole { b0, b1 } => FaradayField::from_fn("normal-quad-dipole", move |x| {
                antisym(&[(1, 2, b0 - b1 * x[1]), (2, 3, b1 * x[3])])
            })
            .with_gradient(move |_| {
                [M4::zeros(), antisym(&[(1, 2, -b1)]), M4::zeros(), antisym(&[(2, 3, b1)])]
            }),
            // F_23 carries -b1 x^1 so that dF = 0; with +b1 x^1 the cyclic sum is 2 b1.
            FieldPreset::Quad45Dipole { b0, b1 } => FaradayField::from_fn("quad45-dipole", move |x| {
                antisym(&[(1, 2, b0 + b1 * x[3]), (2, 3, -b1 * x[1])])
            })
            .with_gradient(move |_| {
                [M4::zeros(), antisym(&[(2, 3, -b1)]), M4::zeros(), antisym(&[(1, 2, b1)])]
            }),
            FieldPreset::LongitudinalE { e2 } => {
                let m = antisym(&[(0, 2, e2)]);
                FaradayField::from_fn("longitudinal-e", move |_| m).with_gradient(zero_grad)
            }
            FieldPreset::RfCavity { e2_0, w_rf } => {
                FaradayField::from_fn("rf-cavity", move |x| antisym(&[(0, 2, e2_0 * (w_rf * x[2]).sin())]))
                    .with_gradient(move |x| {
                        [M4::zeros(), M4::zeros(), antisym(&[(0, 2, e2_0 * w_rf * (w_rf * x[2]).cos())]), M4::zeros()]
                    })
            }
        }
    }

    /// Every preset with representative parameters, for catalog-wide checks.
    pub fn catalog() -> Vec<FieldPreset> {
        vec![
            FieldPreset::Zero,
            FieldPreset::ConstantE { e: [0.3, -0.2, 0.5] },
            FieldPreset::ConstantB { b: [0.1, 0.7, -1.2] },
            FieldPreset::NormalDipole { b0: 1.0 },
            FieldPreset::SkewDipole { b0: 1.0 },
            FieldPreset::NormalQuadDipole { b0: 1.0, b1: 0.5 },
            FieldPreset::Quad45Dipole { b0: 1.0, b1: 0.5 },
            FieldPreset::LongitudinalE { e2: 0.2 },
            FieldPreset::RfCavity { e2_0: 0.1, w_rf: 2.0 },
        ]
    }
}

/// Largest cyclic sum `|d_i F_jk + d_j F_ki + d_k F_ij|` over distinct index
/// triples, by central differences of step `h`. Vanishes for closed forms.
pub fn check_closed(field: &FaradayField, x: &V4, h: f64) -> f64 {
    let d: Vec<M4> = (0..4).map(|l| central_diff(|p| field.lowered(p), x, l, h)).collect();
    let mut worst = 0.0f64;
    for i in 0..4 {
        for j in (i + 1)..4 {
            for k in (j + 1)..4 {
                let s = d[i][(j, k)] + d[j][(k, i)] + d[k][(i, j)];
                worst = worst.max(s.abs());
            }
        }
    }
    worst
}

/// Electromagnetic potential `A_i(x)`.
#[derive(Clone)]
pub struct Potential {
    eval: Arc<dyn Fn(&V4) -> V4 + Send + Sync>,
}

impl Potential {
    pub fn new(f: impl Fn(&V4) -> V4 + Send + Sync + 'static) -> Self {
        Potential { eval: Arc::new(f) }
    }

    pub fn eval(&self, x: &V4) -> V4 {
        (self.eval)(x)
    }

    /// Gauge transform `A + d lambda`, with `d lambda` supplied as a covector field.
    pub fn gauge_shift(&self, dlambda: impl Fn(&V4) -> V4 + Send + Sync + 'static) -> Self {
        let a = self.eval.clone();
        Potential::new(move |x| a(x) + dlambda(x))
    }

    /// Gauge transform with `d lambda` taken by central differences.
    pub fn gauge_shift_scalar(&self, lambda: impl Fn(&V4) -> f64 + Send + Sync + 'static, h: f64) -> Self {
        self.gauge_shift(move |x| {
            let mut g = V4::zeros();
            for l in 0..4 {
                let (mut p, mut m) = (*x, *x);
                p[l] += h;
                m[l] -= h;
                g[l] = (lambda(&p) - lambda(&m)) / (2.0 * h);
            }
            g
        })
    }
}

/// `F_ij = d_i A_j - d_j A_i` by central differences of step `h`.
pub fn from_potential(a: &Potential, h: f64) -> Result<FaradayField> {
    if !(h > 0.0) {
        return Err(Error::invalid("h", "step must be positive"));
    }
    let a = a.clone();
    Ok(FaradayField::from_fn("from-potential", move |x| {
        let mut da = M4::zeros(); // da[(i, j)] = d_i A_j
        for i in 0..4 {
            let (mut p, mut m) = (*x, *x);
            p[i] += h;
            m[i] -= h;
            let d = (a.eval(&p) - a.eval(&m)) / (2.0 * h);
            for j in 0..4 {
                da[(i, j)] = d[j];
            }
        }
        da - da.transpose()
    }))
}

/// Field strength `|F^i_j(x)|` in the observer metric.
pub fn field_norm(field: &FaradayField, x: &V4, bar: &ObserverMetric) -> f64 {
    op_norm(&field.mixed(x), bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_preset_is_zero() {
        let f = FieldPreset::Zero.build();
        assert_eq!(f.lowered(&V4::new(1.0, 2.0, 3.0, 4.0)), M4::zeros());
    }

    #[test]
    fn normal_dipole_layout() {
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let m = f.lowered(&V4::new(0.3, -2.0, 5.0, 1.0));
        let mut expect = M4::zeros();
        expect[(1, 2)] = 1.0;
        expect[(2, 1)] = -1.0;
        assert_eq!(m, expect);
    }

    #[test]
    fn rf_cavity_substitution() {
        let f = FieldPreset::RfCavity { e2_0: 0.1, w_rf: 2.0 }.build();
        let m = f.lowered(&V4::new(0.0, 0.0, PI / 4.0, 0.0));
        assert_relative_eq!(m[(0, 2)], 0.1, epsilon = 1e-15);
        assert_relative_eq!(m[(2, 0)], -0.1, epsilon = 1e-15);
    }

    #[test]
    fn quad_layouts() {
        let x = V4::new(0.0, 0.2, 0.0, -0.3);
        let q = FieldPreset::NormalQuadDipole { b0: 1.0, b1: 0.5 }.build().lowered(&x);
        assert_relative_eq!(q[(1, 2)], 1.0 - 0.5 * 0.2);
        assert_relative_eq!(q[(2, 3)], 0.5 * -0.3);
        let s = FieldPreset::Quad45Dipole { b0: 1.0, b1: 0.5 }.build().lowered(&x);
        assert_relative_eq!(s[(1, 2)], 1.0 + 0.5 * -0.3);
        assert_relative_eq!(s[(2, 3)], -0.5 * 0.2);
    }

    #[test]
    fn constant_b_push_is_lorentz_force() {
        // dy/dtau = F y must equal (E.u, y0 E + u x B)
        let b = [0.3, -0.4, 1.1];
        let f = FieldPreset::ConstantB { b }.build().mixed(&V4::zeros());
        let y = V4::new(2.0, 0.5, 1.0, -1.0);
        let a = f * y;
        let u = [y[1], y[2], y[3]];
        let cross = [u[1] * b[2] - u[2] * b[1], u[2] * b[0] - u[0] * b[2], u[0] * b[1] - u[1] * b[0]];
        assert_relative_eq!(a[0], 0.0);
        for i in 0..3 {
            assert_relative_eq!(a[i + 1], cross[i], epsilon = 1e-15);
        }
        let e = [0.2, -0.7, 0.4];
        let fe = FieldPreset::ConstantE { e }.build().mixed(&V4::zeros());
        let a = fe * y;
        assert_relative_eq!(a[0], e[0] * u[0] + e[1] * u[1] + e[2] * u[2], epsilon = 1e-15);
        for i in 0..3 {
            assert_relative_eq!(a[i + 1], y[0] * e[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn mixed_form_is_raised_lowered_form() {
        let m = Metric::minkowski();
        for p in FieldPreset::catalog() {
            let f = p.build();
            let x = V4::new(0.1, 0.4, -0.3, 0.2);
            let lowered = f.lowered(&x);
            assert_eq!(f.mixed(&x), m.inverse() * lowered);
        }
    }

    #[test]
    fn closedness_examples() {
        let x = V4::new(0.0, 1.0, 1.0, 0.0);
        assert!(check_closed(&FieldPreset::ConstantB { b: [1.0, 2.0, 3.0] }.build(), &x, 1e-3) < 1e-12);
        assert!(check_closed(&FieldPreset::NormalQuadDipole { b0: 1.0, b1: 2.0 }.build(), &x, 1e-3) < 1e-12);
        // F_12 = x^1 x^3: the (1,2,3) cyclic sum is x^1 = 1 at this point
        let bad = FaradayField::from_fn("bad", |x| antisym(&[(1, 2, x[1] * x[3])]));
        let r = check_closed(&bad, &x, 1e-3);
        assert!(r > 0.5, "residual {r}");
        assert_relative_eq!(r, 1.0, epsilon = 1e-9);
        // F_12 = x^1 x^2 only depends on the coordinates of its own plane, so it is closed
        let planar = FaradayField::from_fn("planar", |x| antisym(&[(1, 2, x[1] * x[2])]));
        assert!(check_closed(&planar, &x, 1e-3) < 1e-12);
    }

    #[test]
    fn printed_45_degree_layout_is_not_closed() {
        let printed = FaradayField::from_fn("printed", |x| antisym(&[(1, 2, 1.0 + 0.5 * x[3]), (2, 3, 0.5 * x[1])]));
        assert_relative_eq!(check_closed(&printed, &V4::zeros(), 1e-3), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn catalog_presets_are_closed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in FieldPreset::catalog() {
            let f = p.build();
            for _ in 0..100 {
                let x = V4::from_fn(|_, _| rng.gen_range(-2.0..2.0));
                let r = check_closed(&f, &x, 1e-3);
                assert!(r < 1e-10, "{} residual {r}", p.name());
            }
        }
    }

    #[test]
    fn analytic_gradients_match_differences() {
        for p in FieldPreset::catalog() {
            let f = p.build();
            let x = V4::new(0.3, -0.2, 0.7, 0.4);
            for l in 0..4 {
                let fd = central_diff(|q| f.lowered(q), &x, l, 1e-5);
                assert!((f.d_lowered(&x, l) - fd).amax() < 1e-8, "{}", p.name());
            }
        }
    }

    #[test]
    fn potential_examples() {
        // pure gauge potential gives no field
        let a = Potential::new(|x| V4::new(x[1], x[0], 0.0, 0.0));
        let f = from_potential(&a, 1e-4).unwrap();
        assert!(f.lowered(&V4::new(0.3, 1.0, 2.0, -1.0)).amax() < 1e-10);
        // A_2 = b0 x^1 is the normal dipole
        let b0 = 1.7;
        let a = Potential::new(move |x| V4::new(0.0, 0.0, b0 * x[1], 0.0));
        let f = from_potential(&a, 1e-4).unwrap();
        let dip = FieldPreset::NormalDipole { b0 }.build();
        let x = V4::new(0.1, 2.0, -1.0, 0.5);
        assert!((f.lowered(&x) - dip.lowered(&x)).amax() < 1e-9);
        assert!(check_closed(&f, &x, 1e-3) < 1e-6);
    }

    #[test]
    fn field_norm_examples() {
        let bar = ObserverMetric::lab();
        let x = V4::zeros();
        assert_eq!(field_norm(&FieldPreset::Zero.build(), &x, &bar), 0.0);
        assert_relative_eq!(field_norm(&FieldPreset::NormalDipole { b0: 1.3 }.build(), &x, &bar), 1.3, epsilon = 1e-12);
        assert_relative_eq!(field_norm(&FieldPreset::LongitudinalE { e2: 0.4 }.build(), &x, &bar), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn scaled_field_flips_sign() {
        let f = FieldPreset::NormalDipole { b0: 1.0 }.build();
        let g = f.scaled(-1.0);
        assert_eq!(g.lowered(&V4::zeros()), -f.lowered(&V4::zeros()));
    }

    fn cubic_lambda(c: Vec<f64>) -> impl Fn(&V4) -> f64 + Send + Sync + Clone {
        move |x: &V4| {
            let mut s = 0.0;
            let mut n = 0;
            for i in 0..4 {
                for j in i..4 {
                    for k in j..4 {
                        s += c[n] * x[i] * x[j] * x[k];
                        n += 1;
                    }
                }
                s += c[20 + i] * x[i] * x[i];
            }
            s
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gauge_invariance_of_potential_field(c in proptest::collection::vec(-1.0f64..1.0, 24),
                                               x in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let b0 = 0.8;
            let a = Potential::new(move |x| V4::new(0.0, 0.0, b0 * x[1], -0.3 * x[2]));
            let shifted = a.gauge_shift_scalar(cubic_lambda(c), 1e-4);
            let f1 = from_potential(&a, 1e-4).unwrap();
            let f2 = from_potential(&shifted, 1e-4).unwrap();
            let x = V4::from_vec(x);
            prop_assert!((f1.lowered(&x) - f2.lowered(&x)).amax() < 1e-6);
        }
    }
}
