//! Weak differentiability of the flow: the lifted derivative system on
//! `R^{2d}`, its finite-difference counterpart, hypothesis checks and the
//! clipped convergence metric between them.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::coefficients::{
    condition_integrals, integral_with_doubling, CoefficientField, Coefficients, ConditionReport, DerivativeProvider,
    IntegralCheck, Smoothness,
};
use crate::error::{Error, Result};
use crate::flow::{self, BrownianDriver, FlowEnsemble, Pairing, Trajectory};
use crate::linalg::norm_sq;
use crate::measure::ReferenceMeasure;
use crate::stats::{Accumulator, Estimate};

/// Which second block the lifted field carries.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Second {
    /// `sigma_2 = (grad sigma(x)) y`, `b_2 = (grad b(x)) y`.
    Derivative,
    /// `sigma_2 = (sigma(x + eps y) - sigma(x)) / eps`, likewise `b_2`.
    Difference(f64),
}

struct Lifted {
    base: CoefficientField,
    second: Second,
}

impl Lifted {
    fn d(&self) -> usize {
        self.base.dim()
    }

    fn fill(&self, z: &[f64], sigma: &mut [f64], drift: &mut [f64], jac: Option<(&mut [f64], &mut [f64])>) {
        let (d, m) = (self.d(), self.base.noise_dim());
        let n = 2 * d;
        let (x, y) = z.split_at(d);
        let mut e = self.base.evaluation();
        let ok = self.base.eval_with_jacobian(x, &mut e).is_ok();
        sigma[..d * m].copy_from_slice(&e.sigma);
        drift[..d].copy_from_slice(&e.drift);
        let mut shifted = None;
        match self.second {
            Second::Derivative => {
                for i in 0..d {
                    drift[d + i] = (0..d).map(|j| e.ddrift_at(j, i) * y[j]).sum();
                    for k in 0..m {
                        sigma[(d + i) * m + k] = (0..d).map(|j| e.dsigma_at(j, i, k) * y[j]).sum();
                    }
                }
            }
            Second::Difference(eps) => {
                let xe: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + eps * b).collect();
                let mut f = self.base.evaluation();
                let ok_e = if jac.is_some() {
                    self.base.eval_with_jacobian(&xe, &mut f).is_ok()
                } else {
                    self.base.eval_into(&xe, &mut f);
                    true
                };
                for i in 0..d {
                    drift[d + i] = (f.drift[i] - e.drift[i]) / eps;
                    for k in 0..m {
                        sigma[(d + i) * m + k] = (f.sigma[i * m + k] - e.sigma[i * m + k]) / eps;
                    }
                }
                shifted = Some((f, ok_e));
            }
        }
        let Some((dsigma, ddrift)) = jac else { return };
        let nan = |ok: bool, v: f64| if ok { v } else { f64::NAN };
        for j in 0..n {
            for i in 0..n {
                let v = match (j < d, i < d) {
                    (true, true) => nan(ok, e.ddrift_at(j, i)),
                    (false, true) => 0.0,
                    (false, false) => match &shifted {
                        None => nan(ok, e.ddrift_at(j - d, i - d)),
                        Some((f, ok_e)) => nan(*ok_e, f.ddrift_at(j - d, i - d)),
                    },
                    (true, false) => match &shifted {
                        None => f64::NAN,
                        Some((f, ok_e)) => {
                            let Second::Difference(eps) = self.second else { unreachable!() };
                            nan(ok && *ok_e, (f.ddrift_at(j, i - d) - e.ddrift_at(j, i - d)) / eps)
                        }
                    },
                };
                ddrift[j * n + i] = v;
                for k in 0..m {
                    let v = match (j < d, i < d) {
                        (true, true) => nan(ok, e.dsigma_at(j, i, k)),
                        (false, true) => 0.0,
                        (false, false) => match &shifted {
                            None => nan(ok, e.dsigma_at(j - d, i - d, k)),
                            Some((f, ok_e)) => nan(*ok_e, f.dsigma_at(j - d, i - d, k)),
                        },
                        (true, false) => match &shifted {
                            None => f64::NAN,
                            Some((f, ok_e)) => {
                                let Second::Difference(eps) = self.second else { unreachable!() };
                                nan(ok && *ok_e, (f.dsigma_at(j, i - d, k) - e.dsigma_at(j, i - d, k)) / eps)
                            }
                        },
                    };
                    dsigma[(j * n + i) * m + k] = v;
                }
            }
        }
    }
}

impl Coefficients for Lifted {
    fn dim(&self) -> usize {
        2 * self.d()
    }
    fn noise_dim(&self) -> usize {
        self.base.noise_dim()
    }
    fn eval(&self, z: &[f64], sigma: &mut [f64], drift: &mut [f64]) {
        self.fill(z, sigma, drift, None);
    }
    fn eval_jacobian(
        &self,
        z: &[f64],
        sigma: &mut [f64],
        drift: &mut [f64],
        dsigma: &mut [f64],
        ddrift: &mut [f64],
    ) -> Result<()> {
        self.fill(z, sigma, drift, Some((dsigma, ddrift)));
        Ok(())
    }
}

/// A base field on `R^d` and its lifts to `R^{2d}`, structured with `n1 = d`.
#[derive(Debug, Clone)]
pub struct DerivativeSystem {
    pub base: CoefficientField,
    /// The derivative system for `(X, Y)`.
    pub lifted: CoefficientField,
}

/// Builds the derivative system. The base needs analytic first derivatives
/// in every direction.
pub fn lift(base: &CoefficientField) -> Result<DerivativeSystem> {
    if base.provider() != DerivativeProvider::Analytic {
        return Err(Error::DerivativeUnavailable(format!("{} has no analytic derivatives", base.name())));
    }
    if base.block().is_some() {
        return Err(Error::DerivativeUnavailable(format!(
            "{} is block structured and lacks cross-block derivatives",
            base.name()
        )));
    }
    let lifted = lifted_field(base, Second::Derivative)?;
    Ok(DerivativeSystem { base: base.clone(), lifted })
}

fn lifted_field(base: &CoefficientField, second: Second) -> Result<CoefficientField> {
    let name = match second {
        Second::Derivative => format!("{}_derivative", base.name()),
        Second::Difference(eps) => format!("{}_difference_{eps}", base.name()),
    };
    let inner = Lifted { base: base.clone(), second };
    CoefficientField::new(name, Arc::new(inner), DerivativeProvider::Analytic, Smoothness::RoughPartial)
        .structured(base.dim())
}

impl DerivativeSystem {
    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// The finite-difference system at `epsilon`.
    pub fn epsilon(&self, epsilon: f64) -> Result<CoefficientField> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        lifted_field(&self.base, Second::Difference(epsilon))
    }
}

/// Measures for the derivative problem: `mu_1` on `R^d` and the joint `mu` on `R^{2d}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiftedMeasures {
    pub q: f64,
    pub base: ReferenceMeasure,
    pub joint: ReferenceMeasure,
}

impl LiftedMeasures {
    /// Defaults `alpha_1 = d/2 + q + 0.5` and `alpha = 2 alpha_1 + q + d/2 + 0.5`.
    pub fn default_for(d: usize, q: f64) -> Result<Self> {
        let alpha1 = 0.5 * d as f64 + q + 0.5;
        Self::new(d, q, alpha1, 2.0 * alpha1 + q + 0.5 * d as f64 + 0.5)
    }

    pub fn new(d: usize, q: f64, alpha1: f64, alpha: f64) -> Result<Self> {
        if !(q > 1.0) {
            return Err(Error::InvalidParameter(format!("q must exceed 1, got {q}")));
        }
        let floor = 2.0 * alpha1 + q + 0.5 * d as f64;
        if !(alpha > floor) {
            return Err(Error::InvalidParameter(format!(
                "alpha must exceed 2 alpha1 + q + d/2 = {floor}, got {alpha}"
            )));
        }
        Ok(Self { q, base: ReferenceMeasure::new(d, alpha1)?, joint: ReferenceMeasure::new(2 * d, alpha)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Domination {
    pub samples: usize,
    /// Samples with `|b_bar_2(x, y)| <= |grad b(x)|`.
    pub drift_pass: usize,
    /// Samples with `|sigma_bar_2(x, y)|^2 <= |grad sigma(x)|^2`.
    pub sigma_pass: usize,
}

impl Domination {
    pub fn all_pass(&self) -> bool {
        self.drift_pass == self.samples && self.sigma_pass == self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub p0: f64,
    /// Integrability of the base against `mu_1`, with the `exp(p0 |grad b|)` check.
    pub base: ConditionReport,
    /// `int exp[p0 ([div_y b_2]^- + |b_bar_2| + |sigma_bar_2|^2 + |grad_y sigma_2|^2)] dmu`
    /// for the derivative system.
    pub derivative: IntegralCheck,
    /// The same integral for each finite-difference system.
    pub epsilon: Vec<(f64, IntegralCheck)>,
    /// Largest over smallest finite-difference integral.
    pub band_ratio: f64,
    pub domination: Domination,
    pub pass: bool,
}

fn second_block_integral<R: Rng + ?Sized>(
    f: &CoefficientField,
    m: &ReferenceMeasure,
    p0: f64,
    base: usize,
    rng: &mut R,
) -> Result<IntegralCheck> {
    let mut e = f.evaluation();
    integral_with_doubling(
        m,
        |z| match f.phi_blocks(z, &mut e) {
            Ok((_, phi2)) => (p0 * phi2).exp(),
            Err(_) => f64::NAN,
        },
        base,
        3,
        rng,
    )
}

/// Checks the base conditions, the lifted integrability for the derivative
/// system and every `epsilon`, the `epsilon`-uniform band (max/min below 10)
/// and the pointwise dominations on `samples` draws from the joint measure.
pub fn verify_hypotheses<R: Rng + ?Sized>(
    sys: &DerivativeSystem,
    measures: &LiftedMeasures,
    p0: f64,
    epsilons: &[f64],
    count: usize,
    samples: usize,
    rng: &mut R,
) -> Result<HypothesisReport> {
    if measures.base.dim() != sys.dim() {
        return Err(Error::Dimension("measure and base dimensions differ".into()));
    }
    if epsilons.iter().any(|&e| !(e > 0.0 && e <= 0.5)) {
        return Err(Error::InvalidParameter("epsilons must lie in (0, 1/2]".into()));
    }
    let base_count = (count / 8).max(16);
    let base = condition_integrals(&sys.base, &measures.base, p0, base_count, 3, true, rng)?;
    let derivative = second_block_integral(&sys.lifted, &measures.joint, p0, base_count, rng)?;
    let mut epsilon = Vec::new();
    for &eps in epsilons {
        epsilon.push((eps, second_block_integral(&sys.epsilon(eps)?, &measures.joint, p0, base_count, rng)?));
    }
    let (lo, hi) = epsilon
        .iter()
        .map(|(_, c)| c.estimate.value)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let band_ratio = if epsilon.is_empty() { 1.0 } else { hi / lo };
    let domination = pointwise_domination(sys, &measures.joint, samples, rng)?;
    let pass = base.finite()
        && !derivative.divergent
        && epsilon.iter().all(|(_, c)| !c.divergent)
        && band_ratio < 10.0
        && domination.all_pass();
    Ok(HypothesisReport { p0, base, derivative, epsilon, band_ratio, domination, pass })
}

/// `|b_bar_2| <= |grad b(x)|` and `|sigma_bar_2|^2 <= |grad sigma(x)|^2` at draws from `mu`.
pub fn pointwise_domination<R: Rng + ?Sized>(
    sys: &DerivativeSystem,
    joint: &ReferenceMeasure,
    samples: usize,
    rng: &mut R,
) -> Result<Domination> {
    let d = sys.dim();
    let (mut lifted, mut base) = (sys.lifted.evaluation(), sys.base.evaluation());
    let mut z = vec![0.0; 2 * d];
    let mut out = Domination { samples, drift_pass: 0, sigma_pass: 0 };
    let m = sys.base.noise_dim();
    for _ in 0..samples {
        joint.sample_one(rng, &mut z);
        sys.lifted.eval_into(&z, &mut lifted);
        sys.base.eval_with_jacobian(&z[..d], &mut base)?;
        let scale = 1.0 + norm_sq(&z).sqrt();
        let b2 = norm_sq(&lifted.drift[d..]).sqrt() / scale;
        let s2 = norm_sq(&lifted.sigma[d * m..]) / (scale * scale);
        // Small slack for the rounding in the matrix-vector products.
        let tol = 1e-12;
        if b2 <= norm_sq(&base.ddrift).sqrt() * (1.0 + tol) + tol {
            out.drift_pass += 1;
        }
        if s2 <= norm_sq(&base.dsigma) * (1.0 + tol) + tol {
            out.sigma_pass += 1;
        }
    }
    Ok(out)
}

/// Coupled Euler-Maruyama for `(X, Y)` from samples of the joint measure.
pub fn derivative_flow(
    sys: &DerivativeSystem,
    driver: &BrownianDriver,
    starts: &[Vec<f64>],
    horizon: f64,
    stride: usize,
) -> Result<FlowEnsemble> {
    flow::integrate(&sys.lifted, driver, starts, Pairing::Diagonal, horizon, stride)
}

/// Integrates `X` from `x` and from `x + eps y` under the same increments and
/// returns `(X(x), (X(x + eps y) - X(x)) / eps)` on `R^{2d}`.
pub fn difference_flow(
    sys: &DerivativeSystem,
    epsilon: f64,
    driver: &BrownianDriver,
    starts: &[Vec<f64>],
    horizon: f64,
    stride: usize,
) -> Result<FlowEnsemble> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let d = sys.dim();
    if starts.iter().any(|s| s.len() != 2 * d) {
        return Err(Error::Dimension(format!("starts must have {} coordinates", 2 * d)));
    }
    let xs: Vec<Vec<f64>> = starts.iter().map(|s| s[..d].to_vec()).collect();
    let shifted: Vec<Vec<f64>> = starts.iter().map(|s| (0..d).map(|i| s[i] + epsilon * s[d + i]).collect()).collect();
    let a = flow::integrate(&sys.base, driver, &xs, Pairing::Diagonal, horizon, stride)?;
    let b = flow::integrate(&sys.base, driver, &shifted, Pairing::Diagonal, horizon, stride)?;
    let trajectories = a
        .trajectories
        .iter()
        .zip(&b.trajectories)
        .map(|(u, v)| {
            let mut states = Vec::with_capacity(2 * u.states.len());
            let mut sup: f64 = 0.0;
            for (p, q) in u.states.chunks(d).zip(v.states.chunks(d)) {
                let start = states.len();
                states.extend_from_slice(p);
                states.extend(p.iter().zip(q).map(|(p, q)| (q - p) / epsilon));
                sup = sup.max(norm_sq(&states[start..]).sqrt());
            }
            Trajectory {
                omega: u.omega,
                x_index: u.x_index,
                states,
                sup_norm: sup,
                exploded: u.exploded || v.exploded || !sup.is_finite(),
            }
        })
        .collect();
    Ok(FlowEnsemble { dim: 2 * d, grid: a.grid, trajectories })
}

/// `E int 1 ^ ||Y^1 - Y^2||_{inf,T} dmu` over the second block. Exploded
/// pairs contribute the clip value 1.
pub fn clipped_derivative_metric(a: &FlowEnsemble, b: &FlowEnsemble, joint: &ReferenceMeasure) -> Result<Estimate> {
    if a.dim != b.dim || a.grid != b.grid || a.len() != b.len() || a.dim % 2 != 0 {
        return Err(Error::Mismatch("ensembles differ in dimension, grid or size".into()));
    }
    let d = a.dim / 2;
    let mut acc = Accumulator::new();
    for (u, v) in a.trajectories.iter().zip(&b.trajectories) {
        if u.exploded || v.exploded {
            acc.push(1.0);
            continue;
        }
        let mut best: f64 = 0.0;
        for (p, q) in u.states.chunks(a.dim).zip(v.states.chunks(a.dim)) {
            let s: f64 = p[d..].iter().zip(&q[d..]).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.max(s.sqrt());
        }
        acc.push(best.min(1.0));
    }
    Ok(acc.estimate().scaled(joint.total_mass()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    pub metric: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<EpsilonRow>,
    pub strictly_decreasing: bool,
    /// Final metric over first metric.
    pub reduction: f64,
}

impl ConvergenceTable {
    /// CSV with columns `epsilon,metric,se`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epsilon,metric,se")?;
        for r in &self.rows {
            writeln!(w, "{:e},{:e},{:e}", r.epsilon, r.metric.value, r.metric.se)?;
        }
        Ok(())
    }
}

/// The clipped metric between `Y^eps` and `Y` for each `eps`, all under one driver.
pub fn weak_derivative_convergence(
    sys: &DerivativeSystem,
    epsilons: &[f64],
    driver: &BrownianDriver,
    starts: &[Vec<f64>],
    joint: &ReferenceMeasure,
    horizon: f64,
    stride: usize,
) -> Result<ConvergenceTable> {
    if epsilons.is_empty() {
        return Err(Error::InvalidParameter("need at least one epsilon".into()));
    }
    let y = derivative_flow(sys, driver, starts, horizon, stride)?;
    let mut rows = Vec::new();
    for &eps in epsilons {
        let ye = difference_flow(sys, eps, driver, starts, horizon, stride)?;
        rows.push(EpsilonRow { epsilon: eps, metric: clipped_derivative_metric(&ye, &y, joint)? });
    }
    let strictly_decreasing = rows.windows(2).all(|w| w[1].metric.value < w[0].metric.value);
    let first = rows[0].metric.value;
    let reduction = if first > 0.0 { rows[rows.len() - 1].metric.value / first } else { 0.0 };
    Ok(ConvergenceTable { rows, strictly_decreasing, reduction })
}
