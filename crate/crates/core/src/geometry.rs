//! Minkowski metric, observers, the observer-induced Riemannian metric and
//! the norms and distances built on it.

use crate::connections::Connection;
use crate::{Error, Result, M4, V4};

/// Tolerance used when checking that a vector is unit timelike.
pub const UNIT_TOL: f64 = 1e-10;

/// Lorentzian metric of signature (+,-,-,-).
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub components: M4,
    inverse: M4,
    pub flat: bool,
}

impl Metric {
    pub fn minkowski() -> Self {
        let g = M4::from_diagonal(&V4::new(1.0, -1.0, -1.0, -1.0));
        Metric { components: g, inverse: g, flat: true }
    }

    /// Arbitrary constant symmetric metric. Only the flat case is exercised by
    /// the shipped experiments.
    pub fn new(components: M4) -> Result<Self> {
        if (components - components.transpose()).amax() > 1e-14 {
            return Err(Error::invalid("metric", "not symmetric"));
        }
        let det = components.determinant();
        if !(det.abs() > 0.0) {
            return Err(Error::invalid("metric", "degenerate"));
        }
        let inverse = components.try_inverse().ok_or_else(|| Error::invalid("metric", "degenerate"))?;
        let flat = components == M4::from_diagonal(&V4::new(1.0, -1.0, -1.0, -1.0));
        Ok(Metric { components, inverse, flat })
    }

    #[inline]
    pub fn dot(&self, u: &V4, v: &V4) -> f64 {
        if self.flat {
            u[0] * v[0] - u[1] * v[1] - u[2] * v[2] - u[3] * v[3]
        } else {
            (u.transpose() * self.components * v)[0]
        }
    }

    #[inline]
    pub fn norm_sq(&self, u: &V4) -> f64 {
        self.dot(u, u)
    }

    /// Index lowering `v_i = eta_ij v^j`.
    #[inline]
    pub fn lower(&self, v: &V4) -> V4 {
        if self.flat {
            V4::new(v[0], -v[1], -v[2], -v[3])
        } else {
            self.components * v
        }
    }

    /// Index raising `w^i = eta^ij w_j`.
    #[inline]
    pub fn raise(&self, w: &V4) -> V4 {
        if self.flat {
            V4::new(w[0], -w[1], -w[2], -w[3])
        } else {
            self.inverse * w
        }
    }

    pub fn inverse(&self) -> &M4 {
        &self.inverse
    }
}

impl Default for Metric {
    fn default() -> Self {
        Metric::minkowski()
    }
}

/// A unit timelike, future pointing observer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Observer {
    pub u: V4,
    pub label: String,
}

impl Observer {
    pub fn new(u: V4, label: impl Into<String>, metric: &Metric) -> Result<Self> {
        let norm = metric.norm_sq(&u);
        if (norm - 1.0).abs() > UNIT_TOL || !(u[0] > 0.0) {
            return Err(Error::Normalization { norm, u0: u[0] });
        }
        Ok(Observer { u, label: label.into() })
    }

    /// The laboratory frame `U = (1, 0, 0, 0)`.
    pub fn lab() -> Self {
        Observer { u: V4::new(1.0, 0.0, 0.0, 0.0), label: "lab".into() }
    }
}

/// Positive definite metric `-eta + 2 U_flat (x) U_flat`, with a cached
/// factor `B` such that `B^T B` equals the metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverMetric {
    pub components: M4,
    factor: M4,
    factor_inv: M4,
}

impl ObserverMetric {
    fn from_components(components: M4) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(components)
            .ok_or_else(|| Error::invalid("observer metric", "not positive definite"))?;
        let factor = chol.l().transpose();
        let factor_inv = factor
            .try_inverse()
            .ok_or_else(|| Error::invalid("observer metric", "singular factor"))?;
        Ok(ObserverMetric { components, factor, factor_inv })
    }

    /// Identity metric of the laboratory frame.
    pub fn lab() -> Self {
        ObserverMetric { components: M4::identity(), factor: M4::identity(), factor_inv: M4::identity() }
    }

    #[inline]
    pub fn inner(&self, u: &V4, v: &V4) -> f64 {
        (u.transpose() * self.components * v)[0]
    }

    #[inline]
    pub fn norm(&self, u: &V4) -> f64 {
        self.inner(u, u).max(0.0).sqrt()
    }

    /// Chord distance `|a - b|` in this metric.
    #[inline]
    pub fn dist(&self, a: &V4, b: &V4) -> f64 {
        self.norm(&(a - b))
    }

    pub fn factor(&self) -> &M4 {
        &self.factor
    }

    pub fn factor_inv(&self) -> &M4 {
        &self.factor_inv
    }
}

/// Riemannian metric induced on spacetime by the observer `U`.
pub fn eta_bar(metric: &Metric, observer: &Observer) -> Result<ObserverMetric> {
    let u = &observer.u;
    let norm = metric.norm_sq(u);
    if (norm - 1.0).abs() > UNIT_TOL || !(u[0] > 0.0) {
        return Err(Error::Normalization { norm, u0: u[0] });
    }
    let uf = metric.lower(u);
    let g = -metric.components + 2.0 * uf * uf.transpose();
    ObserverMetric::from_components(g)
}

/// Operator norm of `A` as a map of `(R^4, bar)` into itself, computed as the
/// largest singular value of `B A B^-1`.
pub fn op_norm(a: &M4, bar: &ObserverMetric) -> f64 {
    let m = bar.factor() * a * bar.factor_inv();
    let sv = m.singular_values();
    sv.iter().cloned().fold(0.0, f64::max)
}

/// Sampled distance between two connections at `x`: the largest value of
/// `|c1(X,X) - c2(X,X)| / |X|` over the probe set. The true supremum is over
/// all vector fields, so this is a lower estimate.
pub fn connection_distance(
    c1: &dyn Connection,
    c2: &dyn Connection,
    probes: &[V4],
    bar: &ObserverMetric,
    x: &V4,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    let mut best = 0.0f64;
    for p in probes {
        let n = bar.norm(p);
        if !(n > 0.0) {
            return Err(Error::invalid("probe", "zero norm"));
        }
        let a = c1.coeffs(x, p)?.contract(p, p);
        let b = c2.coeffs(x, p)?.contract(p, p);
        best = best.max(bar.norm(&(a - b)) / n);
    }
    Ok(best)
}

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

/// `n` points of a Halton sequence mapped to unit-hyperboloid velocities whose
/// spatial parts fill the cube `[-scale, scale]^3` around `center`'s spatial part.
pub fn quasi_random_probes(n: usize, center: &V4, scale: f64) -> Vec<V4> {
    (1..=n as u64)
        .map(|i| {
            let u = [radical_inverse(i, 2), radical_inverse(i, 3), radical_inverse(i, 5)];
            let s = [
                center[1] + scale * (2.0 * u[0] - 1.0),
                center[2] + scale * (2.0 * u[1] - 1.0),
                center[3] + scale * (2.0 * u[2] - 1.0),
            ];
            crate::distribution::lift(&s)
        })
        .collect()
}

/// Default probe family: the supplied support velocities followed by 64
/// quasi-random hyperboloid points around their mean.
pub fn default_probes(support: &[V4]) -> Vec<V4> {
    let mut probes: Vec<V4> = support.to_vec();
    let center = if support.is_empty() {
        V4::new(1.0, 0.0, 0.0, 0.0)
    } else {
        support.iter().sum::<V4>() / support.len() as f64
    };
    let spread = support
        .iter()
        .map(|y| (y - center).fixed_rows::<3>(1).amax())
        .fold(0.0, f64::max)
        .max(1e-3);
    probes.extend(quasi_random_probes(64, &center, spread));
    probes
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn boost(r: f64, dir: usize) -> V4 {
        let mut u = V4::zeros();
        u[0] = r.cosh();
        u[dir] = r.sinh();
        u
    }

    #[test]
    fn lab_observer_metric_is_identity() {
        let bar = eta_bar(&Metric::minkowski(), &Observer::lab()).unwrap();
        assert_eq!(bar.components, M4::identity());
        let x = V4::new(0.0, 1.0, 0.0, 0.0);
        assert_eq!(bar.inner(&x, &x), 1.0);
    }

    #[test]
    fn boosted_observer_metric_is_spd() {
        let m = Metric::minkowski();
        let obs = Observer::new(boost(0.5, 1), "boost", &m).unwrap();
        let bar = eta_bar(&m, &obs).unwrap();
        assert_relative_eq!(bar.components, bar.components.transpose(), epsilon = 1e-15);
        let eig = nalgebra::SymmetricEigen::new(bar.components);
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn non_unit_observer_rejected() {
        let m = Metric::minkowski();
        assert!(matches!(
            Observer::new(V4::new(2.0, 0.0, 0.0, 0.0), "bad", &m),
            Err(Error::Normalization { .. })
        ));
        let spacelike = Observer { u: V4::new(0.0, 1.0, 0.0, 0.0), label: "x".into() };
        assert!(eta_bar(&m, &spacelike).is_err());
    }

    #[test]
    fn op_norm_examples() {
        let bar = ObserverMetric::lab();
        assert_relative_eq!(op_norm(&M4::identity(), &bar), 1.0, epsilon = 1e-14);
        assert_eq!(op_norm(&M4::zeros(), &bar), 0.0);
        // constant B3 field of strength 2, mixed form
        let mut f = M4::zeros();
        f[(1, 2)] = 2.0;
        f[(2, 1)] = -2.0;
        // independent oracle: the only nonzero singular values of this block are |b|
        let ata = f.transpose() * f;
        let oracle = ata.symmetric_eigenvalues().max().sqrt();
        assert_relative_eq!(op_norm(&f, &bar), oracle, epsilon = 1e-12);
        assert_relative_eq!(op_norm(&f, &bar), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn op_norm_matches_sampled_sup() {
        let m = Metric::minkowski();
        let bar = eta_bar(&m, &Observer::new(boost(0.3, 2), "b", &m).unwrap()).unwrap();
        let a = M4::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let n = op_norm(&a, &bar);
        let mut best: f64 = 0.0;
        for p in quasi_random_probes(4000, &V4::zeros(), 3.0) {
            for v in [p, V4::new(p[1], p[0], p[3], p[2])] {
                best = best.max(bar.norm(&(a * v)) / bar.norm(&v));
            }
        }
        assert!(best <= n * (1.0 + 1e-12));
        assert!(best > 0.9 * n);
    }

    #[test]
    fn probes_lie_on_hyperboloid() {
        let m = Metric::minkowski();
        for p in quasi_random_probes(64, &boost(1.0, 2), 0.5) {
            assert!((m.norm_sq(&p) - 1.0).abs() < 1e-12);
        }
    }

    fn mat4() -> impl Strategy<Value = M4> {
        proptest::collection::vec(-3.0f64..3.0, 16).prop_map(|v| M4::from_iterator(v))
    }

    proptest! {
        #[test]
        fn observer_metric_spd_for_random_boosts(r in 0.0f64..3.0, th in 0.0f64..3.14, ph in 0.0f64..6.28) {
            let m = Metric::minkowski();
            let dir = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
            let u = V4::new(r.cosh(), r.sinh() * dir[0], r.sinh() * dir[1], r.sinh() * dir[2]);
            let obs = Observer::new(u, "p", &m).unwrap();
            let bar = eta_bar(&m, &obs).unwrap();
            let eig = nalgebra::SymmetricEigen::new(bar.components);
            prop_assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
            prop_assert!((bar.components - bar.components.transpose()).amax() < 1e-12);
        }

        #[test]
        fn op_norm_submultiplicative(a in mat4(), b in mat4(), r in 0.0f64..2.0) {
            let m = Metric::minkowski();
            let u = V4::new(r.cosh(), 0.0, r.sinh(), 0.0);
            let bar = eta_bar(&m, &Observer::new(u, "p", &m).unwrap()).unwrap();
            let lhs = op_norm(&(a * b), &bar);
            let rhs = op_norm(&a, &bar) * op_norm(&b, &bar);
            prop_assert!(lhs <= rhs * (1.0 + 1e-10) + 1e-12);
        }
    }
}
