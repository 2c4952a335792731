//! Mollification `sigma_k = (sigma * chi_k) psi_k` with analytic derivatives.
//!
//! Convolutions are evaluated as normalized sums over a fixed global lattice
//! of spacing `1 / (c k)`, offset by half a cell:
//!
//! `V(x) = sum_y f(y) chi_k(x - y) / sum_y chi_k(x - y)`.
//!
//! Because the lattice does not move with `x`, every derivative of `V` falls
//! on the kernel, so the returned Jacobians are exact derivatives of the
//! returned values and `f` itself is never differentiated. The
//! normalization reproduces constants exactly.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::catalog::eta;
use super::{CoefficientField, Coefficients, DerivativeProvider, Smoothness};
use crate::error::{Error, Result};
use crate::linalg::norm_sq;
use crate::measure::ReferenceMeasure;
use crate::quadrature;

/// Largest lattice dimension handled on the stack.
const MAX_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(-1 / (1 - |u|^2))`.
    Bump,
    /// `exp(-1 / (1 - |u|^4))`, flatter near the centre.
    FlatBump,
}

impl Kernel {
    /// Unnormalized profile `phi(s)` and `phi'(s)` in `s = |u|^2`.
    #[inline]
    pub fn profile(self, s: f64) -> (f64, f64) {
        if s >= 1.0 {
            return (0.0, 0.0);
        }
        match self {
            Kernel::Bump => {
                let d = 1.0 - s;
                let v = (-1.0 / d).exp();
                (v, -v / (d * d))
            }
            Kernel::FlatBump => {
                let d = 1.0 - s * s;
                let v = (-1.0 / d).exp();
                (v, -v * 2.0 * s / (d * d))
            }
        }
    }

    /// `1 / int phi(|u|^2) du` over the unit ball of `R^n`.
    pub fn normalization(self, n: usize) -> f64 {
        let integral = quadrature::integrate(
            |r: f64| r.powi(n as i32 - 1) * self.profile(r * r).0,
            0.0,
            1.0,
            1e-15,
            1e-13,
        );
        1.0 / (ReferenceMeasure::sphere_area(n) * integral)
    }

    /// Normalized kernel `chi(u)`.
    pub fn value(self, u: &[f64]) -> f64 {
        self.normalization(u.len()) * self.profile(norm_sq(u)).0
    }
}

/// Smooth cutoff `psi`: 1 on `B(1)`, 0 outside `B(2)`.
pub fn cutoff(x: &[f64]) -> f64 {
    eta(0.5 * norm_sq(x).sqrt()).0
}

/// `psi_k(x) = psi(x / k)` and its gradient.
pub fn cutoff_k(x: &[f64], k: f64, grad: &mut [f64]) -> f64 {
    let r = norm_sq(x).sqrt();
    let (v, dv) = eta(0.5 * r / k);
    for (g, xi) in grad.iter_mut().zip(x) {
        *g = if r > 0.0 { dv * 0.5 / k * xi / r } else { 0.0 };
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub kernel: Kernel,
    pub level: u32,
    /// Lattice cells per kernel radius; dimension dependent when absent.
    #[serde(default)]
    pub cells_per_radius: Option<u32>,
}

impl MollifierSpec {
    pub fn new(kernel: Kernel, level: u32) -> Result<Self> {
        if level == 0 {
            return Err(Error::InvalidParameter("mollification level must be at least 1".into()));
        }
        Ok(Self { kernel, level, cells_per_radius: None })
    }

    pub fn bump(level: u32) -> Result<Self> {
        Self::new(Kernel::Bump, level)
    }

    pub fn with_cells(mut self, cells: u32) -> Self {
        self.cells_per_radius = Some(cells.max(2));
        self
    }

    pub fn k(&self) -> f64 {
        self.level as f64
    }

    pub fn cells(&self, dims: usize) -> u32 {
        self.cells_per_radius.unwrap_or(match dims {
            0 | 1 => 16,
            2 => 8,
            3 => 4,
            _ => 3,
        })
    }

    fn lattice(&self, dims: usize) -> Lattice {
        let k = self.k();
        Lattice { kernel: self.kernel, k, h: 1.0 / (self.cells(dims) as f64 * k), dims }
    }
}

/// Global half-offset lattice restricted to the kernel support around `x`.
#[derive(Debug, Clone, Copy)]
struct Lattice {
    kernel: Kernel,
    k: f64,
    h: f64,
    dims: usize,
}

impl Lattice {
    /// Calls `visit(y, w, grad_x w)` for every lattice point with `w > 0`; only
    /// the first `dims` coordinates of `y` move.
    fn for_each(&self, x: &[f64], mut visit: impl FnMut(&[f64], f64, &[f64])) {
        let d = self.dims;
        let radius = 1.0 / self.k;
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        let mut idx = [0i64; MAX_DIM];
        for a in 0..d {
            lo[a] = ((x[a] - radius) / self.h - 0.5).ceil() as i64;
            hi[a] = ((x[a] + radius) / self.h - 0.5).floor() as i64;
            if lo[a] > hi[a] {
                return;
            }
            idx[a] = lo[a];
        }
        let mut y = [0.0; MAX_DIM];
        y[..x.len()].copy_from_slice(x);
        let mut grad = [0.0; MAX_DIM];
        let k2 = self.k * self.k;
        loop {
            let mut s = 0.0;
            for a in 0..d {
                y[a] = (idx[a] as f64 + 0.5) * self.h;
                let u = x[a] - y[a];
                s += u * u;
            }
            s *= k2;
            if s < 1.0 {
                let (w, dw) = self.kernel.profile(s);
                if w > 0.0 {
                    for a in 0..d {
                        grad[a] = dw * 2.0 * k2 * (x[a] - y[a]);
                    }
                    visit(&y[..x.len()], w, &grad[..d]);
                }
            }
            let mut a = 0;
            loop {
                if a == d {
                    return;
                }
                idx[a] += 1;
                if idx[a] <= hi[a] {
                    break;
                }
                idx[a] = lo[a];
                a += 1;
            }
        }
    }
}

/// Normalized lattice convolution `(f * chi_k)(x)` of a scalar function over
/// all coordinates of `x`.
pub fn convolve(spec: &MollifierSpec, x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Result<f64> {
    if x.len() > MAX_DIM {
        return Err(Error::Dimension(format!("convolution supports at most {MAX_DIM} dimensions")));
    }
    let lattice = spec.lattice(x.len());
    let (mut num, mut den) = (0.0, 0.0);
    lattice.for_each(x, |y, w, _| {
        num += f(y) * w;
        den += w;
    });
    Ok(num / den)
}

/// Lattice convolution of a vector-valued function, written into `out`.
pub fn convolve_vec(
    spec: &MollifierSpec,
    x: &[f64],
    out: &mut [f64],
    mut f: impl FnMut(&[f64], &mut [f64]),
) -> Result<()> {
    if x.len() > MAX_DIM {
        return Err(Error::Dimension(format!("convolution supports at most {MAX_DIM} dimensions")));
    }
    let lattice = spec.lattice(x.len());
    let mut buf = vec![0.0; out.len()];
    out.fill(0.0);
    let mut den = 0.0;
    lattice.for_each(x, |y, w, _| {
        f(y, &mut buf);
        for (o, v) in out.iter_mut().zip(&buf) {
            *o += v * w;
        }
        den += w;
    });
    out.iter_mut().for_each(|o| *o /= den);
    Ok(())
}

struct Mollified {
    base: CoefficientField,
    spec: MollifierSpec,
    n: usize,
    m: usize,
    block: Option<usize>,
}

/// Output components touched by one lattice pass.
struct Pass {
    lattice_dims: usize,
    rows: Range<usize>,
}

impl Mollified {
    fn passes(&self) -> Vec<Pass> {
        match self.block {
            Some(n1) => vec![Pass { lattice_dims: n1, rows: 0..n1 }, Pass { lattice_dims: self.n, rows: n1..self.n }],
            None => vec![Pass { lattice_dims: self.n, rows: 0..self.n }],
        }
    }

    fn run(
        &self,
        x: &[f64],
        sigma: &mut [f64],
        drift: &mut [f64],
        mut jac: Option<(&mut [f64], &mut [f64])>,
    ) {
        let (n, m) = (self.n, self.m);
        let mut ys = vec![0.0; n * m];
        let mut yb = vec![0.0; n];
        let k = self.spec.k();
        if let Some((ds, db)) = jac.as_mut() {
            ds.fill(0.0);
            db.fill(0.0);
        }
        for pass in self.passes() {
            let d = pass.lattice_dims;
            let lattice = self.spec.lattice(d);
            let rows = pass.rows.clone();
            let width = rows.len() * (m + 1);
            // Per component r: numerator N_r and gradient numerator D_{r, j}.
            let mut num = vec![0.0; width];
            let mut dnum = vec![0.0; width * d];
            let mut den = 0.0;
            let mut dden = [0.0; MAX_DIM];
            let want_grad = jac.is_some();
            lattice.for_each(x, |y, w, gw| {
                self.base.inner().eval(y, &mut ys, &mut yb);
                den += w;
                for j in 0..d {
                    dden[j] += gw[j];
                }
                for (c, v) in component_values(&rows, m, &ys, &yb).enumerate() {
                    num[c] += v * w;
                    if want_grad {
                        for j in 0..d {
                            dnum[c * d + j] += v * gw[j];
                        }
                    }
                }
            });
            let mut dpsi = [0.0; MAX_DIM];
            let psi = cutoff_k(&x[..d], k, &mut dpsi[..d]);
            for (c, (i, kk)) in component_slots(&rows, m).enumerate() {
                let v = num[c] / den;
                let out = v * psi;
                match kk {
                    Some(kk) => sigma[i * m + kk] = out,
                    None => drift[i] = out,
                }
                if let Some((ds, db)) = jac.as_mut() {
                    for j in 0..d {
                        let dv = (dnum[c * d + j] - v * dden[j]) / den;
                        let g = dv * psi + v * dpsi[j];
                        match kk {
                            Some(kk) => ds[(j * n + i) * m + kk] = g,
                            None => db[j * n + i] = g,
                        }
                    }
                }
            }
        }
    }
}

/// Slots `(row, Some(col))` for sigma entries followed by `(row, None)` for drift.
fn component_slots(rows: &Range<usize>, m: usize) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
    rows.clone()
        .flat_map(move |i| (0..m).map(move |k| (i, Some(k))))
        .chain(rows.clone().map(|i| (i, None)))
}

fn component_values<'a>(
    rows: &'a Range<usize>,
    m: usize,
    sigma: &'a [f64],
    drift: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    sigma[rows.start * m..rows.end * m].iter().copied().chain(drift[rows.clone()].iter().copied())
}

impl Coefficients for Mollified {
    fn dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn eval(&self, x: &[f64], sigma: &mut [f64], drift: &mut [f64]) {
        self.run(x, sigma, drift, None);
    }
    fn jacobian(&self, x: &[f64], dsigma: &mut [f64], ddrift: &mut [f64]) -> Result<()> {
        let mut s = vec![0.0; self.n * self.m];
        let mut b = vec![0.0; self.n];
        self.run(x, &mut s, &mut b, Some((dsigma, ddrift)));
        Ok(())
    }
    fn eval_jacobian(
        &self,
        x: &[f64],
        sigma: &mut [f64],
        drift: &mut [f64],
        dsigma: &mut [f64],
        ddrift: &mut [f64],
    ) -> Result<()> {
        self.run(x, sigma, drift, Some((dsigma, ddrift)));
        Ok(())
    }
}

/// Smooth approximant `x -> (f * chi_k)(x) psi_k(x)`. Structured fields keep
/// their structure: the first block is mollified in `x1` only.
pub fn mollify(f: &CoefficientField, spec: &MollifierSpec) -> Result<CoefficientField> {
    if f.dim() > MAX_DIM {
        return Err(Error::Dimension(format!("mollification supports at most {MAX_DIM} dimensions")));
    }
    let inner = Mollified { base: f.clone(), spec: *spec, n: f.dim(), m: f.noise_dim(), block: f.block() };
    let name = format!("{}@k{}{}", f.name(), spec.level, if spec.kernel == Kernel::FlatBump { "f" } else { "" });
    let out = CoefficientField::new(name, Arc::new(inner), DerivativeProvider::Analytic, Smoothness::Smooth);
    match f.block() {
        Some(n1) => out.structured(n1),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightMollificationReport {
    pub level: u32,
    /// `min (lambda * chi_k + alpha log 3 - lambda)` over the grid.
    pub min_margin: f64,
    pub points: usize,
    pub pass: bool,
}

/// Checks `lambda <= lambda * chi_k + alpha log 3` at every point.
pub fn weight_mollification_check(
    m: &ReferenceMeasure,
    spec: &MollifierSpec,
    points: &[Vec<f64>],
) -> Result<WeightMollificationReport> {
    let c = m.alpha() * 3f64.ln();
    let mut min_margin = f64::INFINITY;
    for x in points {
        let conv = convolve(spec, x, |y| m.log_weight_unchecked(y))?;
        min_margin = min_margin.min(conv + c - m.log_weight(x)?);
    }
    Ok(WeightMollificationReport { level: spec.level, min_margin, points: points.len(), pass: min_margin >= 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominationReport {
    pub level: u32,
    /// `max |f * chi_k|(x) / ((1 + |x|) (|f_bar| * chi_k)(x))`; at most 2 when the bound holds.
    pub max_ratio: f64,
    pub violations: usize,
    pub pass: bool,
}

/// Checks `|f * chi_k|(x) / (1 + |x|) <= 2 (|f_bar| * chi_k)(x)` with
/// `f_bar = f / (1 + |y|)`, for a vector-valued `f` of length `width`.
pub fn mollifier_domination_check(
    f: impl Fn(&[f64], &mut [f64]),
    width: usize,
    spec: &MollifierSpec,
    points: &[Vec<f64>],
) -> Result<DominationReport> {
    let mut conv = vec![0.0; width];
    let mut buf = vec![0.0; width];
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for x in points {
        convolve_vec(spec, x, &mut conv, &f)?;
        let lhs = norm_sq(&conv).sqrt() / (1.0 + norm_sq(x).sqrt());
        let rhs = 2.0
            * convolve(spec, x, |y| {
                f(y, &mut buf);
                norm_sq(&buf).sqrt() / (1.0 + norm_sq(y).sqrt())
            })?;
        if lhs > rhs * (1.0 + 1e-12) {
            violations += 1;
        }
        if rhs > 0.0 {
            max_ratio = max_ratio.max(2.0 * lhs / rhs);
        }
    }
    Ok(DominationReport { level: spec.level, max_ratio, violations, pass: violations == 0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub level: u32,
    pub sigma_norm: f64,
    pub drift_norm: f64,
}

/// `||f_k - f||_{L^r(mu)}` restricted to `B(radius)`, by Halton quasi Monte
/// Carlo over the enclosing cube, for each mollification level.
pub fn mollified_convergence(
    f: &CoefficientField,
    m: &ReferenceMeasure,
    specs: &[MollifierSpec],
    radius: f64,
    r: f64,
    points: usize,
) -> Result<Vec<ConvergenceRow>> {
    let n = f.dim();
    if m.dim() != n {
        return Err(Error::Dimension("measure and field dimensions differ".into()));
    }
    let volume = (2.0 * radius).powi(n as i32);
    let nodes: Vec<Vec<f64>> = (0..points as u64)
        .map(|i| quadrature::halton(i, n).into_iter().map(|u| radius * (2.0 * u - 1.0)).collect())
        .filter(|x: &Vec<f64>| norm_sq(x) <= radius * radius)
        .collect();
    let mut e = f.evaluation();
    let base: Vec<(Vec<f64>, Vec<f64>)> = nodes
        .iter()
        .map(|x| {
            f.eval_into(x, &mut e);
            (e.sigma.clone(), e.drift.clone())
        })
        .collect();
    let mut rows = Vec::new();
    for spec in specs {
        let fk = mollify(f, spec)?;
        let mut ek = fk.evaluation();
        let (mut ss, mut sb) = (0.0, 0.0);
        for (x, (s0, b0)) in nodes.iter().zip(&base) {
            fk.eval_into(x, &mut ek);
            let w = m.weight_unchecked(x);
            let ds: f64 = ek.sigma.iter().zip(s0).map(|(a, b)| (a - b).powi(2)).sum();
            let db: f64 = ek.drift.iter().zip(b0).map(|(a, b)| (a - b).powi(2)).sum();
            ss += ds.sqrt().powf(r) * w;
            sb += db.sqrt().powf(r) * w;
        }
        let scale = volume / points as f64;
        rows.push(ConvergenceRow {
            level: spec.level,
            sigma_norm: (ss * scale).powf(1.0 / r),
            drift_norm: (sb * scale).powf(1.0 / r),
        });
    }
    Ok(rows)
}

/// Uniform grid of points in `[-half_width, half_width]^n` with `per_axis` nodes per axis.
pub fn cube_grid(n: usize, half_width: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let step = if per_axis > 1 { 2.0 * half_width / (per_axis - 1) as f64 } else { 0.0 };
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|_| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    -half_width + step * i as f64
                })
                .collect()
        })
        .collect()
}

/// Volume of the unit ball in `R^n`.
pub fn unit_ball_volume(n: usize) -> f64 {
    PI.powf(0.5 * n as f64) / statrs::function::gamma::gamma(0.5 * n as f64 + 1.0)
}
