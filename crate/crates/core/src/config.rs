//! Experiment configuration: a TOML document with a JSON-compatible data model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coefficients::Family;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Density,
    Stability,
    Derivative,
    Analysis,
    VerifyHypotheses,
}

impl ExperimentKind {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Density => "density",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Derivative => "derivative",
            ExperimentKind::Analysis => "analysis",
            ExperimentKind::VerifyHypotheses => "verify-hypotheses",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub n: usize,
    pub alpha: f64,
    /// First-block exponent; required for block-structured families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub horizon: f64,
    pub dt: f64,
    /// Keep every `stride`-th step in recorded paths.
    pub stride: usize,
    /// Level-set radii. Empty means the ensemble-derived default.
    pub radii: Vec<f64>,
    pub p: f64,
    pub q: f64,
    pub p0: f64,
    pub delta: f64,
    pub epsilons: Vec<f64>,
    /// Mollification levels; the last one is used when a single level is needed.
    pub levels: Vec<u32>,
    /// Exponential-form parameters for the maximal-function suite.
    pub thetas: Vec<f64>,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            dt: 1.0 / 64.0,
            stride: 1,
            radii: vec![2.0, 5.0, 10.0, 20.0],
            p: 2.0,
            q: 2.0,
            p0: 1.5,
            delta: 1.0,
            epsilons: vec![0.5, 0.25, 0.125, 0.0625],
            levels: vec![2, 4, 8, 16],
            thetas: vec![0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub omegas: usize,
    pub x_count: usize,
    /// Quadrature and Monte Carlo points for integrals against the measure.
    pub quadrature: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { omegas: 1000, x_count: 1000, quadrature: 20_000 }
    }
}

impl Budgets {
    /// Every budget multiplied by `scale`, never below 16.
    pub fn scaled(&self, scale: f64) -> Self {
        let s = |v: usize| ((v as f64 * scale).round() as usize).max(16);
        Self { omegas: s(self.omegas), x_count: s(self.x_count), quadrature: s(self.quadrature) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub family: Family,
    pub measure: MeasureConfig,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: String,
}

fn default_out() -> String {
    "out".into()
}

impl ExperimentConfig {
    /// A runnable default for each kind.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let family = match kind {
            ExperimentKind::Simulate | ExperimentKind::Density => Family::Ou { dim: 1, theta: 1.0, s: 1.0 },
            ExperimentKind::Stability | ExperimentKind::Derivative | ExperimentKind::VerifyHypotheses => {
                Family::RoughSobolev { gamma: 0.5, s: 0.5 }
            }
            ExperimentKind::Analysis => Family::Zero { dim: 1, noise_dim: 1 },
        };
        let numerics = Numerics::default();
        let (alpha, alpha1) = family.reference_alpha(numerics.q);
        let measure = MeasureConfig { n: family.dim(), alpha, alpha1 };
        let budgets = match kind {
            ExperimentKind::Derivative => Budgets { omegas: 2000, x_count: 2000, quadrature: 10_000 },
            ExperimentKind::Stability => Budgets { omegas: 1000, x_count: 1000, quadrature: 100_000 },
            _ => Budgets::default(),
        };
        Self { kind, family, measure, numerics, budgets, seed: 0, out: default_out() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the measure exponents and numeric ranges for this experiment.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (n, alpha) = (self.measure.n, self.measure.alpha);
        let nm = &self.numerics;
        if n == 0 {
            return bad("measure dimension n must be positive".into());
        }
        if self.family.dim() != n {
            return bad(format!("family {} lives in dimension {}, measure has n = {n}", self.family.label(), self.family.dim()));
        }
        if !(nm.q > 1.0) || !(nm.p > 1.0) || !(nm.p0 > 0.0) {
            return bad("p and q must exceed 1 and p0 must be positive".into());
        }
        if !(alpha > nm.q + 0.5 * n as f64) {
            return bad(format!("alpha must exceed q + n/2 (alpha = {alpha}, q = {}, n = {n})", nm.q));
        }
        if let Some(n1) = self.family.block() {
            let n2 = (n - n1) as f64;
            let Some(a1) = self.measure.alpha1 else {
                return bad("alpha1 is required for block-structured families".into());
            };
            if !(a1 > nm.q + 0.5 * n1 as f64) {
                return bad(format!("alpha1 must exceed q + n1/2 (alpha1 = {a1}, n1 = {n1})"));
            }
            if !(alpha > a1 + 0.5 * n2) {
                return bad(format!("alpha must exceed alpha1 + n2/2 (alpha = {alpha}, alpha1 = {a1}, n2 = {n2})"));
            }
        }
        if !(nm.horizon > 0.0) || !(nm.dt > 0.0) || nm.dt > nm.horizon || nm.stride == 0 {
            return bad("need 0 < dt <= horizon and stride >= 1".into());
        }
        if !(nm.delta > 0.0) {
            return bad("delta must be positive".into());
        }
        if nm.radii.iter().any(|r| !(*r > 0.0)) {
            return bad("radii must be positive".into());
        }
        if nm.epsilons.iter().any(|e| !(*e > 0.0 && *e <= 0.5)) {
            return bad("epsilons must lie in (0, 1/2]".into());
        }
        if nm.levels.iter().any(|k| *k == 0) || nm.levels.windows(2).any(|w| w[1] <= w[0]) {
            return bad("levels must be positive and increasing".into());
        }
        match self.kind {
            ExperimentKind::Stability if nm.levels.len() < 2 => bad("stability needs at least two levels".into()),
            ExperimentKind::Derivative if nm.epsilons.len() < 2 => bad("derivative needs at least two epsilons".into()),
            ExperimentKind::Analysis if n > 2 => bad("the maximal-function suite runs in n = 1 or 2".into()),
            ExperimentKind::Analysis if nm.thetas.iter().any(|t| !(*t > 0.0)) => bad("thetas must be positive".into()),
            _ => Ok(()),
        }
    }
}
