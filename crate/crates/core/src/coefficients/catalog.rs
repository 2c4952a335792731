//! Built-in coefficient families, selectable by name in experiment configs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CoefficientField, Coefficients, DerivativeProvider, Smoothness};
use crate::error::{Error, Result};
use crate::linalg::norm_sq;

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn dim1() -> usize {
    1
}
fn dim3() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    /// `sigma = 0`, `b = 0`.
    Zero {
        #[serde(default = "dim1")]
        dim: usize,
        #[serde(default = "dim1")]
        noise_dim: usize,
    },
    /// `sigma = scale * I`, `b = 0`.
    Translation {
        #[serde(default = "dim1")]
        dim: usize,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `sigma = S + geometric * diag(x)`, `b = A x`.
    Linear {
        drift: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
        #[serde(default)]
        geometric: f64,
    },
    /// `b = -theta x`, `sigma = s I`.
    Ou {
        #[serde(default = "dim1")]
        dim: usize,
        #[serde(default = "one")]
        theta: f64,
        #[serde(default = "one")]
        s: f64,
    },
    /// `b_i = -x_i + a sin x_i`, `sigma = s diag(1 + cos(x_i) / 2)`.
    SmoothNonlinear {
        #[serde(default = "dim1")]
        dim: usize,
        #[serde(default = "half")]
        a: f64,
        #[serde(default = "half")]
        s: f64,
    },
    /// `b = beta log(1/|x|) eta(|x|) x / |x|` supported in `B(1)`, `sigma = s I`.
    LogSingular {
        #[serde(default = "dim3")]
        dim: usize,
        #[serde(default = "half")]
        beta: f64,
        #[serde(default = "half")]
        s: f64,
    },
    /// Two blocks on `R^2`: `sigma = [[s1, 0], [0, s2 (1 + H(x1)/2)(1 + 0.3 sin x2)]]`,
    /// `b = (-x1, g(x1) h(x2))` with `g` a step function and
    /// `h(x2) = -x2 + a max(0, 1 - |x2|)`.
    PartialSobolev {
        #[serde(default = "half")]
        s1: f64,
        #[serde(default = "half")]
        s2: f64,
        #[serde(default = "one")]
        a: f64,
        #[serde(default = "half")]
        step: f64,
    },
    /// One-dimensional `b = -x + gamma x log(1/|x|) eta(|x|)`, `sigma = s`.
    /// The drift is Sobolev but not Lipschitz at the origin.
    RoughSobolev {
        #[serde(default = "half")]
        gamma: f64,
        #[serde(default = "half")]
        s: f64,
    },
}

impl Family {
    /// The shipped families with default parameters.
    pub fn catalog() -> Vec<Family> {
        vec![
            Family::Linear {
                drift: vec![vec![-0.5, 0.3], vec![-0.3, -0.5]],
                sigma: vec![vec![0.5, 0.0], vec![0.2, 0.4]],
                geometric: 0.0,
            },
            Family::Ou { dim: 1, theta: 1.0, s: 1.0 },
            Family::SmoothNonlinear { dim: 1, a: 0.5, s: 0.5 },
            Family::LogSingular { dim: 3, beta: 0.5, s: 0.5 },
            Family::PartialSobolev { s1: 0.5, s2: 0.5, a: 1.0, step: 0.5 },
            Family::RoughSobolev { gamma: 0.5, s: 0.5 },
        ]
    }

    /// Block split for structured families.
    pub fn block(&self) -> Option<usize> {
        match self {
            Family::PartialSobolev { .. } => Some(1),
            _ => None,
        }
    }

    /// Reference exponents `(alpha, alpha_1)` exceeding the integrability
    /// thresholds for `q` by one half: `alpha = q + n/2 + 1/2`, and for block
    /// families `alpha_1 = q + n_1/2 + 1/2`, `alpha = max(alpha, alpha_1 + n_2/2 + 1/2)`.
    pub fn reference_alpha(&self, q: f64) -> (f64, Option<f64>) {
        let n = self.dim() as f64;
        let base = q + 0.5 * n + 0.5;
        match self.block() {
            None => (base, None),
            Some(n1) => {
                let a1 = q + 0.5 * n1 as f64 + 0.5;
                (base.max(a1 + 0.5 * (n - n1 as f64) + 0.5), Some(a1))
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Family::Zero { .. } => "zero",
            Family::Translation { .. } => "translation",
            Family::Linear { .. } => "linear",
            Family::Ou { .. } => "ou",
            Family::SmoothNonlinear { .. } => "smooth_nonlinear",
            Family::LogSingular { .. } => "log_singular",
            Family::PartialSobolev { .. } => "partial_sobolev",
            Family::RoughSobolev { .. } => "rough_sobolev",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Family::Zero { dim, .. }
            | Family::Translation { dim, .. }
            | Family::Ou { dim, .. }
            | Family::SmoothNonlinear { dim, .. }
            | Family::LogSingular { dim, .. } => *dim,
            Family::Linear { drift, .. } => drift.len(),
            Family::PartialSobolev { .. } => 2,
            Family::RoughSobolev { .. } => 1,
        }
    }

    /// Whether the field must be mollified before pathwise density tracking.
    pub fn needs_mollification(&self) -> bool {
        matches!(self, Family::LogSingular { .. } | Family::PartialSobolev { .. } | Family::RoughSobolev { .. })
    }

    pub fn build(&self) -> Result<CoefficientField> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::InvalidParameter(format!("{what} must be positive")))
            } else {
                Ok(v)
            }
        };
        let label = self.label();
        let field = match self {
            Family::Zero { dim, noise_dim } => {
                let (n, m) = (positive(*dim, "dim")?, positive(*noise_dim, "noise_dim")?);
                smooth(label, Linear::new(vec![0.0; n * n], vec![0.0; n * m], n, m, 0.0))
            }
            Family::Translation { dim, scale } => {
                let n = positive(*dim, "dim")?;
                smooth(label, Linear::new(vec![0.0; n * n], diag(n, *scale), n, n, 0.0))
            }
            Family::Ou { dim, theta, s } => {
                let n = positive(*dim, "dim")?;
                smooth(label, Linear::new(diag(n, -theta), diag(n, *s), n, n, 0.0))
            }
            Family::Linear { drift, sigma, geometric } => {
                let n = positive(drift.len(), "drift rows")?;
                if drift.iter().any(|r| r.len() != n) {
                    return Err(Error::Dimension("drift matrix must be square".into()));
                }
                if sigma.len() != n {
                    return Err(Error::Dimension("sigma must have one row per state coordinate".into()));
                }
                let m = positive(sigma[0].len(), "sigma columns")?;
                if sigma.iter().any(|r| r.len() != m) {
                    return Err(Error::Dimension("sigma rows differ in length".into()));
                }
                if *geometric != 0.0 && m != n {
                    return Err(Error::Dimension("geometric noise needs a square sigma".into()));
                }
                smooth(label, Linear::new(drift.concat(), sigma.concat(), n, m, *geometric))
            }
            Family::SmoothNonlinear { dim, a, s } => {
                smooth(label, SmoothNonlinear { n: positive(*dim, "dim")?, a: *a, s: *s })
            }
            Family::LogSingular { dim, beta, s } => CoefficientField::new(
                label,
                Arc::new(LogSingular { n: positive(*dim, "dim")?, beta: *beta, s: *s }),
                DerivativeProvider::Analytic,
                Smoothness::Sobolev,
            ),
            Family::PartialSobolev { s1, s2, a, step } => CoefficientField::new(
                label,
                Arc::new(PartialSobolev { s1: *s1, s2: *s2, a: *a, step: *step }),
                DerivativeProvider::Analytic,
                Smoothness::RoughPartial,
            )
            .structured(1)?,
            Family::RoughSobolev { gamma, s } => CoefficientField::new(
                label,
                Arc::new(RoughSobolev { gamma: *gamma, s: *s }),
                DerivativeProvider::Analytic,
                Smoothness::Sobolev,
            ),
        };
        Ok(field)
    }
}

fn smooth(label: &str, c: impl Coefficients + 'static) -> CoefficientField {
    CoefficientField::new(label, Arc::new(c), DerivativeProvider::Analytic, Smoothness::Smooth)
}

fn diag(n: usize, v: f64) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        d[i * n + i] = v;
    }
    d
}

/// Smooth cutoff equal to 1 on `[0, 1/2]` and 0 on `[1, inf)`.
pub(crate) fn eta(r: f64) -> (f64, f64) {
    fn h(t: f64) -> (f64, f64) {
        if t <= 0.0 {
            (0.0, 0.0)
        } else {
            let v = (-1.0 / t).exp();
            (v, v / (t * t))
        }
    }
    // Transition variable t in [0, 1] as r runs over [1/2, 1].
    let t = 2.0 * (1.0 - r);
    let (a, da) = h(t);
    let (b, db) = h(1.0 - t);
    if a + b == 0.0 {
        return (if t >= 1.0 { 1.0 } else { 0.0 }, 0.0);
    }
    let v = a / (a + b);
    let dv_dt = (da * (a + b) - a * (da - db)) / ((a + b) * (a + b));
    (v, -2.0 * dv_dt)
}

/// Linear drift with additive plus optional diagonal multiplicative noise.
#[derive(Debug, Clone)]
pub struct Linear {
    a: Vec<f64>,
    s: Vec<f64>,
    n: usize,
    m: usize,
    geometric: f64,
}

impl Linear {
    pub fn new(a: Vec<f64>, s: Vec<f64>, n: usize, m: usize, geometric: f64) -> Self {
        Self { a, s, n, m, geometric }
    }
}

impl Coefficients for Linear {
    fn dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64], sigma: &mut [f64], drift: &mut [f64]) {
        sigma.copy_from_slice(&self.s);
        if self.geometric != 0.0 {
            for i in 0..self.n {
                sigma[i * self.m + i] += self.geometric * x[i];
            }
        }
        for (i, d) in drift.iter_mut().enumerate() {
            *d = self.a[i * self.n..(i + 1) * self.n].iter().zip(x).map(|(a, x)| a * x).sum();
        }
    }
    fn jacobian(&self, _x: &[f64], dsigma: &mut [f64], ddrift: &mut [f64]) -> Result<()> {
        let (n, m) = (self.n, self.m);
        dsigma.fill(0.0);
        if self.geometric != 0.0 {
            for i in 0..n {
                dsigma[(i * n + i) * m + i] = self.geometric;
            }
        }
        for j in 0..n {
            for i in 0..n {
                ddrift[j * n + i] = self.a[i * n + j];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SmoothNonlinear {
    n: usize,
    a: f64,
    s: f64,
}

impl Coefficients for SmoothNonlinear {
    fn dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.n
    }
    fn eval(&self, x: &[f64], sigma: &mut [f64], drift: &mut [f64]) {
        let n = self.n;
        sigma.fill(0.0);
        for i in 0..n {
            sigma[i * n + i] = self.s * (1.0 + 0.5 * x[i].cos());
            drift[i] = -x[i] + self.a * x[i].sin();
        }
    }
    fn jacobian(&self, x: &[f64], dsigma: &mut [f64], ddrift: &mut [f64]) -> Result<()> {
        let n = self.n;
        dsigma.fill(0.0);
        ddrift.fill(0.0);
        for i in 0..n {
            dsigma[(i * n + i) * n + i] = -0.5 * self.s * x[i].sin();
            ddrift[i * n + i] = -1.0 + self.a * x[i].cos();
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LogSingular {
    n: usize,
    beta: f64,
    s: f64,
}

impl LogSingular {
    /// Radial profile `phi(r) = beta log(1/r) eta(r)` and its derivative.
    fn profile(&self, r: f64) -> (f64, f64) {
        if r >= 1.0 {
            return (0.0, 0.0);
        }
        let (e, de) = eta(r);
        let l = -r.ln();
        (self.beta * l * e, self.beta * (-e / r + l * de))
    }
}

impl Coefficients for LogSingular {
    fn dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.n
    }
    fn eval(&self, x: &[f64], sigma: &mut [f64], drift: &mut [f64]) {
        let n = self.n;
        sigma.fill(0.0);
        for i in 0..n {
            sigma[i * n + i] = self.s;
        }
        let r = norm_sq(x).sqrt();
        let (phi, _) = self.profile(r);
        for (d, xi) in drift.iter_mut().zip(x) {
            *d = if phi == 0.0 { 0.0 } else { phi * xi / r };
        }
    }
    fn jacobian(&self, x: &[f64], dsigma: &mut [f64], ddrift: &mut [f64]) -> Result<()> {
        let n = self.n;
        dsigma.fill(0.0);
        let r = norm_sq(x).sqrt();
        if r == 0.0 {
            ddrift.fill(f64::NAN);
            return Ok(());
        }
        let (phi, dphi) = self.profile(r);
        // d_j (phi(r) x_i / r) = dphi x_i x_j / r^2 + phi (delta_ij / r - x_i x_j / r^3).
        for j in 0..n {
            for i in 0..n {
                let xx = x[i] * x[j] / (r * r);
                let delta = if i == j { 1.0 } else { 0.0 };
                ddrift[j * n + i] = dphi * xx + phi * (delta - xx) / r;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct PartialSobolev {
    s1: f64,
    s2: f64,
    a: f64,
    step: f64,
}

impl PartialSobolev {
    fn g(&self, x1: f64) -> f64 {
        if x1 >= 0.0 {
            1.0
        } else {
            self.step
        }
    }
    fn h(&self, x2: f64) -> (f64, f64) {
        let bump = (1.0 - x2.abs()).max(0.0);
        let dbump = if x2.abs() < 1.0 { -x2.signum() } else { 0.0 };
        (-x2 + self.a * bump, -1.0 + self.a * dbump)
    }
    fn heaviside(x1: f64) -> f64 {
        if x1 >= 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl Coefficients for PartialSobolev {
    fn dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64], sigma: &mut [f64], drift: &mut [f64]) {
        sigma[0] = self.s1;
        sigma[1] = 0.0;
        sigma[2] = 0.0;
        sigma[3] = self.s2 * (1.0 + 0.5 * Self::heaviside(x[0])) * (1.0 + 0.3 * x[1].sin());
        drift[0] = -x[0];
        drift[1] = self.g(x[0]) * self.h(x[1]).0;
    }
    fn jacobian(&self, x: &[f64], dsigma: &mut [f64], ddrift: &mut [f64]) -> Result<()> {
        // Index (j * 2 + i) * 2 + k; derivatives of the second block in x1 do not exist.
        dsigma.fill(0.0);
        dsigma[3] = f64::NAN;
        dsigma[7] = self.s2 * (1.0 + 0.5 * Self::heaviside(x[0])) * 0.3 * x[1].cos();
        ddrift[0] = -1.0;
        ddrift[1] = f64::NAN;
        ddrift[2] = 0.0;
        ddrift[3] = self.g(x[0]) * self.h(x[1]).1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct RoughSobolev {
    gamma: f64,
    s: f64,
}

impl Coefficients for RoughSobolev {
    fn dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], sigma: &mut [f64], drift: &mut [f64]) {
        sigma[0] = self.s;
        let r = x[0].abs();
        let rough = if r > 0.0 && r < 1.0 { self.gamma * x[0] * (-r.ln()) * eta(r).0 } else { 0.0 };
        drift[0] = -x[0] + rough;
    }
    fn jacobian(&self, x: &[f64], dsigma: &mut [f64], ddrift: &mut [f64]) -> Result<()> {
        dsigma[0] = 0.0;
        let r = x[0].abs();
        ddrift[0] = if r == 0.0 {
            f64::NAN
        } else if r >= 1.0 {
            -1.0
        } else {
            // d/dx [x log(1/|x|) eta(|x|)] = (log(1/r) - 1) eta + r log(1/r) eta'(r).
            let (e, de) = eta(r);
            let l = -r.ln();
            -1.0 + self.gamma * ((l - 1.0) * e + r * l * de)
        };
        Ok(())
    }
}
