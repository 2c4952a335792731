//! SDE coefficient fields `(sigma, b)`, the functionals `Lambda_1`, `Lambda_2`
//! and the integrability conditions they are checked against.
//!
//! Layout conventions, shared by every field:
//! - `sigma` is `n x m`, row-major: `sigma[i * m + k]`.
//! - `dsigma[(j * n + i) * m + k]` is `d_j sigma^{ik}`.
//! - `ddrift[j * n + i]` is `d_j b_i`.
//!
//! Derivatives a field cannot provide (for example `d_{x1}` of the second
//! block of a rough-partial field) are reported as `NaN`.

pub mod catalog;
pub mod mollifier;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm_sq, Matrix};
use crate::measure::ReferenceMeasure;
use crate::stats::{Accumulator, Estimate};

pub use catalog::Family;
pub use mollifier::{Kernel, MollifierSpec};

/// Raw coefficient evaluation. Implementors fill caller-provided buffers.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn eval(&self, x: &[f64], sigma: &mut [f64], drift: &mut [f64]);

    /// Analytic Jacobians, if the family has them.
    fn jacobian(&self, _x: &[f64], _dsigma: &mut [f64], _ddrift: &mut [f64]) -> Result<()> {
        Err(Error::DerivativeUnavailable("no analytic jacobian".into()))
    }

    /// Values and analytic Jacobians together; override when one pass is cheaper.
    fn eval_jacobian(
        &self,
        x: &[f64],
        sigma: &mut [f64],
        drift: &mut [f64],
        dsigma: &mut [f64],
        ddrift: &mut [f64],
    ) -> Result<()> {
        self.eval(x, sigma, drift);
        self.jacobian(x, dsigma, ddrift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DerivativeProvider {
    Analytic,
    /// Central differences with step `scale * (1 + |x|)`.
    FiniteDifference { scale: f64 },
}

impl DerivativeProvider {
    pub fn finite_difference() -> Self {
        DerivativeProvider::FiniteDifference { scale: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    Smooth,
    Sobolev,
    RoughPartial,
}

/// Buffers for one evaluation of a field at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub sigma: Vec<f64>,
    pub drift: Vec<f64>,
    pub dsigma: Vec<f64>,
    pub ddrift: Vec<f64>,
    n: usize,
    m: usize,
    scratch: Vec<f64>,
}

impl Evaluation {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            sigma: vec![0.0; n * m],
            drift: vec![0.0; n],
            dsigma: vec![0.0; n * n * m],
            ddrift: vec![0.0; n * n],
            n,
            m,
            scratch: vec![0.0; 2 * (n * m + n) + n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn sigma_at(&self, i: usize, k: usize) -> f64 {
        self.sigma[i * self.m + k]
    }

    /// `d_j sigma^{ik}`.
    #[inline]
    pub fn dsigma_at(&self, j: usize, i: usize, k: usize) -> f64 {
        self.dsigma[(j * self.n + i) * self.m + k]
    }

    /// `d_j b_i`.
    #[inline]
    pub fn ddrift_at(&self, j: usize, i: usize) -> f64 {
        self.ddrift[j * self.n + i]
    }
}

/// A coefficient pair with metadata. Cheap to clone.
#[derive(Clone)]
pub struct CoefficientField {
    name: String,
    inner: Arc<dyn Coefficients>,
    provider: DerivativeProvider,
    smoothness: Smoothness,
    block: Option<usize>,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("noise_dim", &self.noise_dim())
            .field("provider", &self.provider)
            .field("smoothness", &self.smoothness)
            .field("block", &self.block)
            .finish()
    }
}

impl CoefficientField {
    pub fn new(
        name: impl Into<String>,
        inner: Arc<dyn Coefficients>,
        provider: DerivativeProvider,
        smoothness: Smoothness,
    ) -> Self {
        Self { name: name.into(), inner, provider, smoothness, block: None }
    }

    /// Marks the field as block structured: the first `n1` rows of sigma and
    /// components of b depend on `x_1 = x[..n1]` only.
    pub fn structured(mut self, n1: usize) -> Result<Self> {
        if n1 == 0 || n1 >= self.dim() {
            return Err(Error::InvalidParameter(format!(
                "block split n1 = {n1} must lie strictly between 0 and n = {}",
                self.dim()
            )));
        }
        self.block = Some(n1);
        Ok(self)
    }

    pub fn with_provider(mut self, provider: DerivativeProvider) -> Self {
        self.provider = provider;
        self
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }

    pub fn provider(&self) -> DerivativeProvider {
        self.provider
    }

    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }

    pub fn block(&self) -> Option<usize> {
        self.block
    }

    pub fn inner(&self) -> &Arc<dyn Coefficients> {
        &self.inner
    }

    pub fn evaluation(&self) -> Evaluation {
        Evaluation::new(self.dim(), self.noise_dim())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!("point has {} coordinates, field has {}", x.len(), self.dim())));
        }
        Ok(())
    }

    /// Values only.
    #[inline]
    pub fn eval_into(&self, x: &[f64], e: &mut Evaluation) {
        self.inner.eval(x, &mut e.sigma, &mut e.drift);
    }

    /// Values and Jacobians.
    pub fn eval_with_jacobian(&self, x: &[f64], e: &mut Evaluation) -> Result<()> {
        match self.provider {
            DerivativeProvider::Analytic => {
                self.inner.eval_jacobian(x, &mut e.sigma, &mut e.drift, &mut e.dsigma, &mut e.ddrift)
            }
            DerivativeProvider::FiniteDifference { scale } => {
                self.inner.eval(x, &mut e.sigma, &mut e.drift);
                self.finite_difference_jacobian(x, scale, e);
                Ok(())
            }
        }
    }

    fn finite_difference_jacobian(&self, x: &[f64], scale: f64, e: &mut Evaluation) {
        let (n, m) = (e.n, e.m);
        let h = scale * (1.0 + norm_sq(x).sqrt());
        let nm = n * m;
        let (buf, xs) = e.scratch.split_at_mut(2 * (nm + n));
        xs.copy_from_slice(x);
        for j in 0..n {
            let (plus, minus) = buf.split_at_mut(nm + n);
            xs[j] = x[j] + h;
            {
                let (s, b) = plus.split_at_mut(nm);
                self.inner.eval(xs, s, b);
            }
            xs[j] = x[j] - h;
            {
                let (s, b) = minus.split_at_mut(nm);
                self.inner.eval(xs, s, b);
            }
            xs[j] = x[j];
            for idx in 0..nm {
                e.dsigma[j * nm + idx] = (plus[idx] - minus[idx]) / (2.0 * h);
            }
            for i in 0..n {
                e.ddrift[j * n + i] = (plus[nm + i] - minus[nm + i]) / (2.0 * h);
            }
        }
    }

    pub fn sigma(&self, x: &[f64]) -> Result<Matrix> {
        self.check_dim(x)?;
        let mut e = self.evaluation();
        self.eval_into(x, &mut e);
        Ok(Matrix { rows: self.dim(), cols: self.noise_dim(), data: e.sigma })
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut e = self.evaluation();
        self.eval_into(x, &mut e);
        Ok(e.drift)
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<Evaluation> {
        self.check_dim(x)?;
        let mut e = self.evaluation();
        self.eval_with_jacobian(x, &mut e)?;
        Ok(e)
    }

    /// Pointwise `(|sigma| / (1 + |x|), |b| / (1 + |x|))`.
    pub fn scaled_field(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_dim(x)?;
        let mut e = self.evaluation();
        self.eval_into(x, &mut e);
        Ok(scaled_norms(x, &e))
    }

    pub fn lambda1(&self, m: &ReferenceMeasure, x: &[f64]) -> Result<Vec<f64>> {
        self.check_measure(m)?;
        let e = self.jacobian(x)?;
        let mut out = vec![0.0; self.noise_dim()];
        lambda1_into(&e, m, x, &mut out)?;
        Ok(out)
    }

    pub fn lambda2(&self, m: &ReferenceMeasure, x: &[f64]) -> Result<f64> {
        self.check_measure(m)?;
        let e = self.jacobian(x)?;
        lambda2_from(&e, m, x, self.block)
    }

    pub fn grad_contraction(&self, x: &[f64]) -> Result<Contraction> {
        let e = self.jacobian(x)?;
        grad_contraction_from(&e, self.block)
    }

    fn check_measure(&self, m: &ReferenceMeasure) -> Result<()> {
        if m.dim() != self.dim() {
            return Err(Error::Dimension(format!("measure dim {} vs field dim {}", m.dim(), self.dim())));
        }
        Ok(())
    }

    /// `Phi_0 = [div b]^- + |b_bar| + |grad sigma|^2 + |sigma_bar|^2`, with
    /// only block-diagonal derivatives for structured fields.
    pub fn phi0(&self, x: &[f64], e: &mut Evaluation) -> Result<f64> {
        self.eval_with_jacobian(x, e)?;
        phi_from(e, x, self.block, None)
    }

    /// Split `Phi_0` into the `x1`-block and `x2`-block parts of a structured
    /// field. The first part is computed from `x1` alone.
    pub fn phi_blocks(&self, x: &[f64], e: &mut Evaluation) -> Result<(f64, f64)> {
        let n1 = self.block.ok_or_else(|| Error::InvalidParameter("field is not structured".into()))?;
        self.eval_with_jacobian(x, e)?;
        Ok((phi_from(e, &x[..n1], Some(n1), Some(Block::First))?, phi_from(e, x, Some(n1), Some(Block::Second))?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Block {
    First,
    Second,
}

fn rows_of(block: Option<usize>, which: Option<Block>, n: usize) -> std::ops::Range<usize> {
    match (block, which) {
        (Some(n1), Some(Block::First)) => 0..n1,
        (Some(n1), Some(Block::Second)) => n1..n,
        _ => 0..n,
    }
}

/// Same-block test for index pairs in structured fields.
#[inline]
fn same_block(block: Option<usize>, i: usize, j: usize) -> bool {
    match block {
        Some(n1) => (i < n1) == (j < n1),
        None => true,
    }
}

fn need(v: f64, what: &str) -> Result<f64> {
    if v.is_nan() {
        Err(Error::DerivativeUnavailable(what.into()))
    } else {
        Ok(v)
    }
}

/// `|sigma_bar|` and `|b_bar|` from an evaluation.
pub fn scaled_norms(x: &[f64], e: &Evaluation) -> (f64, f64) {
    let d = 1.0 + norm_sq(x).sqrt();
    (norm_sq(&e.sigma).sqrt() / d, norm_sq(&e.drift).sqrt() / d)
}

fn phi_from(e: &Evaluation, x_scale: &[f64], block: Option<usize>, which: Option<Block>) -> Result<f64> {
    let (n, m) = (e.n, e.m);
    let rows = rows_of(block, which, n);
    let mut div = 0.0;
    let mut grad_sq = 0.0;
    let mut s_sq = 0.0;
    let mut b_sq = 0.0;
    for i in rows.clone() {
        div += need(e.ddrift_at(i, i), "divergence of b")?;
        b_sq += e.drift[i] * e.drift[i];
        for k in 0..m {
            s_sq += e.sigma_at(i, k).powi(2);
        }
        for j in rows.clone() {
            if !same_block(block, i, j) {
                continue;
            }
            for k in 0..m {
                grad_sq += need(e.dsigma_at(j, i, k), "gradient of sigma")?.powi(2);
            }
        }
    }
    let d = 1.0 + norm_sq(x_scale).sqrt();
    Ok((-div).max(0.0) + b_sq.sqrt() / d + grad_sq + s_sq / (d * d))
}

/// `Lambda_1` component `l = div(sigma^{., l}) + <sigma^{., l}, grad lambda>`.
pub fn lambda1_into(e: &Evaluation, m: &ReferenceMeasure, x: &[f64], out: &mut [f64]) -> Result<()> {
    let (n, mm) = (e.n, e.m);
    let c = -2.0 * m.alpha() / (1.0 + norm_sq(x));
    for (l, o) in out.iter_mut().enumerate().take(mm) {
        let mut v = 0.0;
        for i in 0..n {
            v += need(e.dsigma_at(i, i, l), "divergence of sigma")? + e.sigma_at(i, l) * c * x[i];
        }
        *o = v;
    }
    Ok(())
}

/// `Lambda_2 = div b + (1/2) <sigma sigma^*, Hess lambda> + <b, grad lambda>
/// - (1/2) <grad sigma, (grad sigma)^*>`.
pub fn lambda2_from(e: &Evaluation, m: &ReferenceMeasure, x: &[f64], block: Option<usize>) -> Result<f64> {
    let (n, mm) = (e.n, e.m);
    let alpha = m.alpha();
    let s = 1.0 + norm_sq(x);
    let mut div = 0.0;
    let mut bx = 0.0;
    for i in 0..n {
        div += need(e.ddrift_at(i, i), "divergence of b")?;
        bx += e.drift[i] * x[i];
    }
    let mut frob = 0.0;
    let mut sx_sq = 0.0;
    for k in 0..mm {
        let mut sx = 0.0;
        for i in 0..n {
            let v = e.sigma_at(i, k);
            frob += v * v;
            sx += v * x[i];
        }
        sx_sq += sx * sx;
    }
    let gen = -alpha * frob / s + 2.0 * alpha * sx_sq / (s * s);
    let contraction = grad_contraction_from(e, block)?.total;
    Ok(div + gen - 2.0 * alpha * bx / s - 0.5 * contraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contraction {
    pub total: f64,
    /// Block parts for structured fields: `(x1-block, x2-block)`.
    pub blocks: Option<(f64, f64)>,
}

/// `sum_k sum_{i,j} d_i sigma^{jk} d_j sigma^{ik}`. For structured fields only
/// same-block index pairs enter, so `d_{x1} sigma_2` is never read.
pub fn grad_contraction_from(e: &Evaluation, block: Option<usize>) -> Result<Contraction> {
    let (n, m) = (e.n, e.m);
    let mut parts = [0.0; 2];
    for i in 0..n {
        for j in 0..n {
            if !same_block(block, i, j) {
                continue;
            }
            let slot = match block {
                Some(n1) if i >= n1 => 1,
                _ => 0,
            };
            for k in 0..m {
                let a = need(e.dsigma_at(i, j, k), "gradient of sigma")?;
                let b = need(e.dsigma_at(j, i, k), "gradient of sigma")?;
                parts[slot] += a * b;
            }
        }
    }
    Ok(Contraction { total: parts[0] + parts[1], blocks: block.map(|_| (parts[0], parts[1])) })
}

/// The contraction over every index pair, ignoring any block structure.
pub fn full_grad_contraction(e: &Evaluation) -> Result<f64> {
    grad_contraction_from(e, None).map(|c| c.total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegralCheck {
    pub estimate: Estimate,
    /// Running estimates at budgets `base, 2 base, 4 base, ...`.
    pub doubling: Vec<f64>,
    pub max_share: f64,
    pub nonfinite: u64,
    pub divergent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub p0: f64,
    /// `int exp[p0 ([div b]^- + |b_bar| + |sigma_bar|^2 + |grad sigma|^2)] dmu`.
    pub main: IntegralCheck,
    /// `int exp(p0 |grad b|) dmu`, when requested.
    pub gradient: Option<IntegralCheck>,
}

impl ConditionReport {
    pub fn finite(&self) -> bool {
        !self.main.divergent && self.gradient.as_ref().is_none_or(|g| !g.divergent)
    }
}

/// Monte Carlo estimate of `int f dmu` at budgets `base * 2^j`, `j <= doublings`,
/// flagging divergence when the running estimate does not settle or a single
/// sample dominates.
pub fn integral_with_doubling<R: Rng + ?Sized>(
    m: &ReferenceMeasure,
    mut f: impl FnMut(&[f64]) -> f64,
    base: usize,
    doublings: u32,
    rng: &mut R,
) -> Result<IntegralCheck> {
    let mass = m.total_mass()?;
    let mut acc = Accumulator::new();
    let mut x = vec![0.0; m.dim()];
    let mut doubling = Vec::new();
    let mut target = base;
    let mut drawn = 0;
    for _ in 0..=doublings {
        while drawn < target {
            m.sample_one(rng, &mut x);
            acc.push(f(&x));
            drawn += 1;
        }
        doubling.push(mass * acc.mean());
        target *= 2;
    }
    let est = acc.estimate().scaled(mass);
    let last = doubling.len();
    let unsettled = doubling[last.saturating_sub(3)..]
        .windows(2)
        .any(|w| (w[1] - w[0]).abs() > 0.25 * w[1].abs().max(f64::MIN_POSITIVE));
    let share = acc.max_share();
    let divergent = unsettled || share > 0.1 || !est.value.is_finite();
    Ok(IntegralCheck { estimate: est, doubling, max_share: share, nonfinite: acc.nonfinite(), divergent })
}

/// Integrability conditions for a field against a measure.
pub fn condition_integrals<R: Rng + ?Sized>(
    f: &CoefficientField,
    m: &ReferenceMeasure,
    p0: f64,
    base: usize,
    doublings: u32,
    with_gradient: bool,
    rng: &mut R,
) -> Result<ConditionReport> {
    if m.dim() != f.dim() {
        return Err(Error::Dimension("measure and field dimensions differ".into()));
    }
    let mut e = f.evaluation();
    let main = integral_with_doubling(
        m,
        |x| match f.phi0(x, &mut e) {
            Ok(v) => (p0 * v).exp(),
            Err(_) => f64::NAN,
        },
        base,
        doublings,
        rng,
    )?;
    let gradient = if with_gradient {
        let mut e = f.evaluation();
        Some(integral_with_doubling(
            m,
            |x| match f.eval_with_jacobian(x, &mut e) {
                Ok(()) => (p0 * norm_sq(&e.ddrift).sqrt()).exp(),
                Err(_) => f64::NAN,
            },
            base,
            doublings,
            rng,
        )?)
    } else {
        None
    };
    Ok(ConditionReport { p0, main, gradient })
}

/// Checks that the first `n1` rows of sigma and components of b do not move
/// when `x2` is varied. Returns the largest observed change.
pub fn block_independence<R: Rng + ?Sized>(f: &CoefficientField, trials: usize, rng: &mut R) -> Result<f64> {
    let n1 = f.block().ok_or_else(|| Error::InvalidParameter("field is not structured".into()))?;
    let (n, m) = (f.dim(), f.noise_dim());
    let mut e1 = f.evaluation();
    let mut e2 = f.evaluation();
    let mut worst: f64 = 0.0;
    let mut x = vec![0.0; n];
    for _ in 0..trials {
        for v in x.iter_mut() {
            *v = rng.random_range(-5.0..5.0);
        }
        f.eval_into(&x, &mut e1);
        for v in x[n1..].iter_mut() {
            *v = rng.random_range(-5.0..5.0);
        }
        f.eval_into(&x, &mut e2);
        for i in 0..n1 {
            worst = worst.max((e1.drift[i] - e2.drift[i]).abs());
            for k in 0..m {
                worst = worst.max((e1.sigma_at(i, k) - e2.sigma_at(i, k)).abs());
            }
        }
    }
    Ok(worst)
}
