//! Reference measures `dmu = (1 + |x|^2)^(-alpha) dx` on `R^n`.
//!
//! `lambda(x) = -alpha log(1 + |x|^2)` is the log-weight. Integrals against the
//! measure are always taken against the *unnormalized* weight, so that
//! `integral of 1 dmu = total_mass()`. Sampling draws from the normalized
//! probability `mu / mu(R^n)`; [`ReferenceMeasure::expect`] multiplies the
//! sample mean back by the total mass.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{norm_sq, Matrix};
use crate::quadrature;
use crate::stats::{Accumulator, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeasure {
    dim: usize,
    alpha: f64,
}

/// Result of a Monte Carlo integral against the measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub estimate: Estimate,
    /// Samples where the integrand was not finite; excluded from the mean.
    pub nonfinite: u64,
    pub samples: u64,
}

fn check_point(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite point {x:?}")))
    }
}

impl ReferenceMeasure {
    /// Builds the measure. Any `alpha > 0` gives a valid weight; operations
    /// that need a finite total mass check `alpha > n/2` themselves.
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { dim, alpha })
    }

    /// Builds the measure and requires finite total mass.
    pub fn finite(dim: usize, alpha: f64) -> Result<Self> {
        let m = Self::new(dim, alpha)?;
        m.require_finite_mass()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn has_finite_mass(&self) -> bool {
        self.alpha > 0.5 * self.dim as f64
    }

    fn require_finite_mass(&self) -> Result<()> {
        if self.has_finite_mass() {
            Ok(())
        } else {
            Err(Error::InfiniteMass { alpha: self.alpha, half_dim: 0.5 * self.dim as f64 })
        }
    }

    #[inline]
    pub(crate) fn log_weight_unchecked(&self, x: &[f64]) -> f64 {
        -self.alpha * norm_sq(x).ln_1p()
    }

    #[inline]
    pub(crate) fn weight_unchecked(&self, x: &[f64]) -> f64 {
        (1.0 + norm_sq(x)).powf(-self.alpha)
    }

    /// `(1 + |x|^2)^(-alpha)`.
    pub fn weight(&self, x: &[f64]) -> Result<f64> {
        check_point(x)?;
        Ok(self.weight_unchecked(x))
    }

    /// `lambda(x) = -alpha log(1 + |x|^2)`.
    pub fn log_weight(&self, x: &[f64]) -> Result<f64> {
        check_point(x)?;
        Ok(self.log_weight_unchecked(x))
    }

    /// Weight of a radius, `(1 + r^2)^(-alpha)`.
    pub fn radial_weight(&self, r: f64) -> f64 {
        (1.0 + r * r).powf(-self.alpha)
    }

    #[inline]
    pub(crate) fn grad_log_weight_into(&self, x: &[f64], out: &mut [f64]) {
        let c = -2.0 * self.alpha / (1.0 + norm_sq(x));
        for (o, xi) in out.iter_mut().zip(x) {
            *o = c * xi;
        }
    }

    /// `grad lambda(x) = -2 alpha x / (1 + |x|^2)`.
    pub fn grad_log_weight(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_point(x)?;
        let mut g = vec![0.0; x.len()];
        self.grad_log_weight_into(x, &mut g);
        Ok(g)
    }

    #[inline]
    pub(crate) fn hess_log_weight_entry(&self, x: &[f64], s: f64, i: usize, j: usize) -> f64 {
        let diag = if i == j { -2.0 * self.alpha / s } else { 0.0 };
        diag + 4.0 * self.alpha * (x[i] * x[j]) / (s * s)
    }

    /// Entries `-2 alpha delta_ij / (1+|x|^2) + 4 alpha x_i x_j / (1+|x|^2)^2`.
    pub fn hess_log_weight(&self, x: &[f64]) -> Result<Matrix> {
        check_point(x)?;
        let n = x.len();
        let s = 1.0 + norm_sq(x);
        let mut h = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                h.set(i, j, self.hess_log_weight_entry(x, s, i, j));
            }
        }
        Ok(h)
    }

    /// Surface area of the unit sphere in `R^n`.
    pub fn sphere_area(dim: usize) -> f64 {
        let h = 0.5 * dim as f64;
        2.0 * PI.powf(h) / ln_gamma(h).exp()
    }

    /// `mu(R^n) = pi^(n/2) Gamma(alpha - n/2) / Gamma(alpha)`.
    pub fn total_mass(&self) -> Result<f64> {
        self.require_finite_mass()?;
        let h = 0.5 * self.dim as f64;
        Ok(PI.powf(h) * (ln_gamma(self.alpha - h) - ln_gamma(self.alpha)).exp())
    }

    /// `C_1 = integral of |x| dmu`, finite when `alpha > (n+1)/2`.
    pub fn abs_moment(&self) -> Result<f64> {
        let a = 0.5 * (self.dim as f64 + 1.0);
        if self.alpha <= a {
            return Err(Error::InfiniteMass { alpha: self.alpha, half_dim: a });
        }
        Ok(Self::sphere_area(self.dim) * 0.5 * ln_beta(a, self.alpha - a).exp())
    }

    /// `integral of g(|x|) dmu` by adaptive radial quadrature over `[r0, r1]`
    /// (`r1 = inf` allowed).
    pub fn radial_integral(&self, g: impl Fn(f64) -> f64, r0: f64, r1: f64) -> f64 {
        let n = self.dim as i32;
        let integrand = |r: f64| {
            if r == 0.0 && n > 1 {
                return 0.0;
            }
            r.powi(n - 1) * g(r) * self.radial_weight(r)
        };
        let area = Self::sphere_area(self.dim);
        let v = if r1.is_infinite() {
            quadrature::integrate_to_infinity(integrand, r0, 1e-14, 1e-12)
        } else {
            quadrature::integrate(integrand, r0, r1, 1e-14, 1e-12)
        };
        area * v
    }

    /// Mass of the ball `B(0, r)`.
    pub fn ball_mass(&self, r: f64) -> f64 {
        self.radial_integral(|_| 1.0, 0.0, r)
    }

    /// Degrees of freedom `2 alpha - n` of the Student-t representation.
    pub fn student_dof(&self) -> f64 {
        2.0 * self.alpha - self.dim as f64
    }

    /// One draw from `mu / mu(R^n)`: `Z / sqrt(W)` with `Z ~ N(0, I_n)` and
    /// `W ~ chi^2(2 alpha - n)`.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let chi = ChiSquared::new(self.student_dof()).expect("positive degrees of freedom");
        for o in out.iter_mut() {
            *o = rng.sample(StandardNormal);
        }
        let w: f64 = chi.sample(rng);
        let s = w.sqrt().recip();
        out.iter_mut().for_each(|o| *o *= s);
    }

    /// `count` i.i.d. draws from the normalized measure.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Vec<f64>>> {
        self.require_finite_mass()?;
        Ok((0..count)
            .map(|_| {
                let mut p = vec![0.0; self.dim];
                self.sample_one(rng, &mut p);
                p
            })
            .collect())
    }

    /// Monte Carlo estimate of `integral of f dmu` (unnormalized measure).
    pub fn expect<R: Rng + ?Sized>(
        &self,
        f: impl Fn(&[f64]) -> f64,
        count: usize,
        rng: &mut R,
    ) -> Result<Expectation> {
        let mass = self.total_mass()?;
        let mut acc = Accumulator::new();
        let mut p = vec![0.0; self.dim];
        for _ in 0..count {
            self.sample_one(rng, &mut p);
            acc.push(f(&p));
        }
        Ok(Expectation { estimate: acc.estimate().scaled(mass), nonfinite: acc.nonfinite(), samples: count as u64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn m(n: usize, a: f64) -> ReferenceMeasure {
        ReferenceMeasure::new(n, a).unwrap()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(m(1, 1.0).weight(&[0.0]).unwrap(), 1.0);
        assert!((m(1, 1.0).weight(&[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((m(2, 2.0).weight(&[1.0, 1.0]).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!(matches!(m(1, 1.0).weight(&[f64::NAN]), Err(Error::Domain(_))));
        assert!(m(1, 1.0).weight(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn log_weight_consistent_with_weight() {
        let mu = m(3, 2.7);
        let mut rng = seed::stream(1, "test", 0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
            let w = mu.weight(&x).unwrap();
            let lw = mu.log_weight(&x).unwrap();
            assert!((lw.exp() - w).abs() <= 1e-13 * w);
        }
    }

    #[test]
    fn grad_examples() {
        assert_eq!(m(2, 1.3).grad_log_weight(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!((m(1, 1.0).grad_log_weight(&[1.0]).unwrap()[0] + 1.0).abs() < 1e-15);
        let g = m(2, 3.0).grad_log_weight(&[1.0, 0.0]).unwrap();
        assert!((g[0] + 3.0).abs() < 1e-15 && g[1] == 0.0);
    }

    #[test]
    fn hess_examples() {
        let h = m(1, 1.0).hess_log_weight(&[0.0]).unwrap();
        assert_eq!(h.data, vec![-2.0]);
        let h = m(2, 1.0).hess_log_weight(&[0.0, 0.0]).unwrap();
        assert_eq!(h.data, vec![-2.0, 0.0, 0.0, -2.0]);
        let h = m(3, 1.7).hess_log_weight(&[0.3, -1.2, 2.5]).unwrap();
        assert!(h.is_symmetric(0.0));
    }

    #[test]
    fn total_mass_examples() {
        assert!((m(2, 2.0).total_mass().unwrap() - PI).abs() < 1e-12);
        assert!((m(1, 1.0).total_mass().unwrap() - PI).abs() < 1e-12);
        assert!(matches!(m(1, 0.4).total_mass(), Err(Error::InfiniteMass { .. })));
        assert!(m(2, 1.0).total_mass().is_err());
    }

    #[test]
    fn abs_moment_matches_radial_quadrature() {
        for (n, a) in [(1, 3.0), (2, 3.5), (3, 4.0)] {
            let mu = m(n, a);
            let q = mu.radial_integral(|r| r, 0.0, f64::INFINITY);
            let c = mu.abs_moment().unwrap();
            assert!(((q - c) / c).abs() < 1e-8, "n={n}: {q} vs {c}");
        }
        assert!(m(1, 1.0).abs_moment().is_err());
    }

    #[test]
    fn sample_empty_and_infinite_mass() {
        let mut rng = seed::stream(1, "test", 0);
        assert!(m(2, 2.0).sample(&mut rng, 0).unwrap().is_empty());
        assert!(matches!(m(1, 0.5).sample(&mut rng, 3), Err(Error::InfiniteMass { .. })));
    }

    #[test]
    fn sample_first_coordinate_centered() {
        let mu = m(2, 3.0);
        let mut rng = seed::stream(11, "test", 0);
        let pts = mu.sample(&mut rng, 20_000).unwrap();
        let mut acc = Accumulator::new();
        acc.extend(pts.iter().map(|p| p[0]));
        let e = acc.estimate();
        assert!(e.value.abs() < 3.0 * e.se, "{e:?}");
    }

    #[test]
    fn expect_constant_and_odd() {
        let mu = m(1, 1.5);
        let mut rng = seed::stream(5, "test", 0);
        let one = mu.expect(|_| 1.0, 1000, &mut rng).unwrap();
        assert!((one.estimate.value - mu.total_mass().unwrap()).abs() < 1e-12);
        let odd = mu.expect(|x| x[0].powi(3) / (1.0 + x[0] * x[0]), 20_000, &mut rng).unwrap();
        assert!(odd.estimate.value.abs() < 3.0 * odd.estimate.se);
    }

    #[test]
    fn expect_flags_nonfinite() {
        let mu = m(1, 1.5);
        let mut rng = seed::stream(5, "test", 1);
        let e = mu.expect(|x| if x[0] > 0.0 { f64::NAN } else { 1.0 }, 1000, &mut rng).unwrap();
        assert!(e.nonfinite > 400 && e.nonfinite < 600);
        assert_eq!(e.samples, 1000);
    }
}
