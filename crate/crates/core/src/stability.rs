//! The log-type stability functional between two flows, the assembled
//! right-hand side it is compared against, and convergence experiments across
//! mollification levels.

use serde::Serialize;

use crate::coefficients::mollifier::mollify;
use crate::coefficients::{CoefficientField, Kernel, MollifierSpec};
use crate::error::{Error, Result};
use crate::flow::{self, BrownianDriver, FlowEnsemble, MetricEstimate, Pairing};
use crate::measure::ReferenceMeasure;
use crate::quadrature::halton;
use crate::stats::{Accumulator, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityValue {
    pub delta: f64,
    /// `E int_{G_R and G~_R} log(||X - X~||^2 / delta^2 + 1) dmu`.
    pub estimate: Estimate,
    /// `(P x mu)(G_R and G~_R)`.
    pub support: f64,
    pub empty: bool,
}

/// Sup distance over recorded times, restricted to coordinates `from..`.
fn block_distance(e1: &FlowEnsemble, e2: &FlowEnsemble, j: usize, from: usize) -> f64 {
    let n = e1.dim;
    let (a, b) = (&e1.trajectories[j], &e2.trajectories[j]);
    let mut best: f64 = 0.0;
    for (u, v) in a.states.chunks(n).zip(b.states.chunks(n)) {
        let d: f64 = u[from..].iter().zip(&v[from..]).map(|(p, q)| (p - q) * (p - q)).sum();
        best = best.max(d);
    }
    best.sqrt()
}

/// Monte Carlo stability functional. With `block = Some(n1)` the distance
/// uses only the `x_2` coordinates.
pub fn stability_functional(
    e1: &FlowEnsemble,
    e2: &FlowEnsemble,
    m: &ReferenceMeasure,
    radius: f64,
    delta: f64,
    block: Option<usize>,
) -> Result<StabilityValue> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    if e1.dim != e2.dim || e1.grid != e2.grid || e1.len() != e2.len() {
        return Err(Error::Mismatch("ensembles differ in dimension, grid or size".into()));
    }
    let mass = m.total_mass()?;
    let from = block.unwrap_or(0);
    let (mut acc, mut inside) = (Accumulator::new(), Accumulator::new());
    for j in 0..e1.len() {
        let (a, b) = (&e1.trajectories[j], &e2.trajectories[j]);
        if a.omega != b.omega || a.x_index != b.x_index {
            return Err(Error::Mismatch("ensembles are indexed differently".into()));
        }
        let keep = a.sup_norm <= radius && b.sup_norm <= radius;
        inside.push(if keep { 1.0 } else { 0.0 });
        acc.push(if keep {
            let d = block_distance(e1, e2, j, from);
            (d * d / (delta * delta)).ln_1p()
        } else {
            0.0
        });
    }
    let support = inside.mean() * mass;
    Ok(StabilityValue { delta, estimate: acc.estimate().scaled(mass), support, empty: support == 0.0 })
}

/// Lebesgue norm `(int_{B(R)} |g|^r dx)^{1/r}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BallNorm {
    pub value: f64,
    /// Non-finite, or the first half of the points disagrees with all of them by more than 25%.
    pub divergent: bool,
}

/// Dyadic shells `R 2^{-j-1} < |x| <= R 2^{-j}` for `j < SHELLS - 1`, plus the inner ball.
const SHELLS: usize = 10;

/// Several ball norms `||g_i||_{L^{r_i}(B(R))}` from one pass. Points are
/// split evenly over dyadic shells around the origin and each shell is
/// sampled by Halton points in its bounding cube, so mass concentrated near
/// the centre is resolved.
pub fn ball_norms(
    n: usize,
    radius: f64,
    powers: &[f64],
    points: usize,
    mut g: impl FnMut(&[f64], &mut [f64]),
) -> Vec<BallNorm> {
    let c = powers.len();
    let per_shell = (points / SHELLS).max(2);
    let unit = crate::coefficients::mollifier::unit_ball_volume(n);
    let (mut full, mut half) = (vec![0.0; c], vec![0.0; c]);
    let (mut x, mut vals) = (vec![0.0; n], vec![0.0; c]);
    for j in 0..SHELLS {
        let outer = radius * 0.5f64.powi(j as i32);
        let inner = if j + 1 == SHELLS { 0.0 } else { 0.5 * outer };
        let volume = unit * (outer.powi(n as i32) - inner.powi(n as i32));
        let (mut sums, mut first) = (vec![0.0; c], vec![0.0; c]);
        let (mut hits, mut first_hits) = (0usize, 0usize);
        for i in 0..per_shell {
            let u = halton(i as u64 + 1, n);
            for (xi, ui) in x.iter_mut().zip(&u) {
                *xi = outer * (2.0 * ui - 1.0);
            }
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2 <= outer * outer && r2 > inner * inner {
                g(&x, &mut vals);
                hits += 1;
                for ((s, v), r) in sums.iter_mut().zip(&vals).zip(powers) {
                    *s += v.abs().powf(*r);
                }
            }
            if i + 1 == per_shell / 2 {
                first.copy_from_slice(&sums);
                first_hits = hits;
            }
        }
        for i in 0..c {
            if hits > 0 {
                full[i] += volume * sums[i] / hits as f64;
            }
            if first_hits > 0 {
                half[i] += volume * first[i] / first_hits as f64;
            }
        }
    }
    (0..c)
        .map(|i| {
            let value = full[i].powf(1.0 / powers[i]);
            let divergent = !value.is_finite() || (full[i] > 0.0 && (half[i] - full[i]).abs() > 0.25 * full[i]);
            BallNorm { value, divergent }
        })
        .collect()
}

pub fn ball_norm(n: usize, radius: f64, r: f64, points: usize, mut g: impl FnMut(&[f64]) -> f64) -> BallNorm {
    ball_norms(n, radius, &[r], points, |x, out| out[0] = g(x))[0]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityBound {
    pub delta: f64,
    /// Ball radius used for the gradient norms: `3R`, or `4R` for structured fields.
    pub gradient_radius: f64,
    pub grad_drift_lq: f64,
    pub grad_sigma_l2q: f64,
    pub sigma_diff_l2q: f64,
    pub drift_diff_lq: f64,
    /// The right-hand side with the multiplicative constants set to 1.
    pub value: f64,
    pub divergent: bool,
}

/// Frobenius norms of the gradients used by the bound: all of them, or only
/// `grad_{x_2} b_2`, `grad_{x_2} sigma_2` for structured fields.
fn gradient_norms(f: &CoefficientField, x: &[f64], e: &mut crate::coefficients::Evaluation) -> (f64, f64) {
    if f.eval_with_jacobian(x, e).is_err() {
        return (f64::NAN, f64::NAN);
    }
    let (n, m) = (f.dim(), f.noise_dim());
    let from = f.block().unwrap_or(0);
    let (mut gb, mut gs) = (0.0, 0.0);
    for j in from..n {
        for i in from..n {
            gb += e.ddrift_at(j, i).powi(2);
            for k in 0..m {
                gs += e.dsigma_at(j, i, k).powi(2);
            }
        }
    }
    (gb.sqrt(), gs.sqrt())
}

/// Differences of `(sigma, b)` restricted to the `x_2` rows for structured fields.
fn differences(
    f: &CoefficientField,
    g: &CoefficientField,
    x: &[f64],
    ef: &mut crate::coefficients::Evaluation,
    eg: &mut crate::coefficients::Evaluation,
) -> (f64, f64) {
    f.eval_into(x, ef);
    g.eval_into(x, eg);
    let (n, m) = (f.dim(), f.noise_dim());
    let from = f.block().unwrap_or(0);
    let (mut ds, mut db) = (0.0, 0.0);
    for i in from..n {
        db += (ef.drift[i] - eg.drift[i]).powi(2);
        for k in 0..m {
            ds += (ef.sigma[i * m + k] - eg.sigma[i * m + k]).powi(2);
        }
    }
    (ds.sqrt(), db.sqrt())
}

/// Assembles
/// `||grad b||_q + ||grad sigma||_2q + ||grad sigma||_2q^2
///  + ||sigma - sigma~||_2q^2 / delta^2 + (||sigma - sigma~||_2q + ||b - b~||_q) / delta`
/// with gradient norms over `B(3R)` (over `B(4R)` and in `x_2` only for
/// structured fields) and differences over `B(R)`.
pub fn stability_bound(
    f: &CoefficientField,
    g: &CoefficientField,
    radius: f64,
    delta: f64,
    q: f64,
    points: usize,
) -> Result<StabilityBound> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    bound_with(f, g, radius, Some(delta), q, points)
}

/// With `delta = None` the level distance `||sigma - sigma~|| + ||b - b~||` is used.
fn bound_with(
    f: &CoefficientField,
    g: &CoefficientField,
    radius: f64,
    delta: Option<f64>,
    q: f64,
    points: usize,
) -> Result<StabilityBound> {
    if f.dim() != g.dim() || f.noise_dim() != g.noise_dim() || f.block() != g.block() {
        return Err(Error::Mismatch("fields differ in shape or block structure".into()));
    }
    if !(q >= 1.0) {
        return Err(Error::InvalidParameter(format!("need q >= 1, got {q}")));
    }
    let n = f.dim();
    let gradient_radius = if f.block().is_some() { 4.0 * radius } else { 3.0 * radius };
    let mut e = f.evaluation();
    let grads = ball_norms(n, gradient_radius, &[q, 2.0 * q], points, |x, out| {
        let (gb, gs) = gradient_norms(f, x, &mut e);
        out[0] = gb;
        out[1] = gs;
    });
    let (gb, gs) = (grads[0], grads[1]);
    let (ds, db) = difference_norms(f, g, radius, q, points);
    let delta = delta.unwrap_or((ds.value + db.value).max(f64::MIN_POSITIVE));
    let value = gb.value
        + gs.value
        + gs.value * gs.value
        + ds.value * ds.value / (delta * delta)
        + (ds.value + db.value) / delta;
    Ok(StabilityBound {
        delta,
        gradient_radius,
        grad_drift_lq: gb.value,
        grad_sigma_l2q: gs.value,
        sigma_diff_l2q: ds.value,
        drift_diff_lq: db.value,
        value,
        divergent: gb.divergent || gs.divergent || ds.divergent || db.divergent,
    })
}

/// `||sigma_k - sigma_l||_{L^2q(B(R))} + ||b_k - b_l||_{L^q(B(R))}`, in `x_2`
/// rows for structured fields.
pub fn level_distance(f: &CoefficientField, g: &CoefficientField, radius: f64, q: f64, points: usize) -> f64 {
    let (ds, db) = difference_norms(f, g, radius, q, points);
    ds.value + db.value
}

fn difference_norms(f: &CoefficientField, g: &CoefficientField, radius: f64, q: f64, points: usize) -> (BallNorm, BallNorm) {
    let (mut ef, mut eg) = (f.evaluation(), g.evaluation());
    let d = ball_norms(f.dim(), radius, &[2.0 * q, q], points, |x, out| {
        let (ds, db) = differences(f, g, x, &mut ef, &mut eg);
        out[0] = ds;
        out[1] = db;
    });
    (d[0], d[1])
}

/// Smallest `R = 2^j >= 1` with `(P x mu)(G_R^c) / mu(R^n) < fraction` for every ensemble.
pub fn tail_radius(ensembles: &[FlowEnsemble], fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("tail fraction must lie in (0, 1), got {fraction}")));
    }
    let mut radius: f64 = 1.0;
    for e in ensembles {
        let mut sups = e.sup_norms();
        sups.sort_by(f64::total_cmp);
        let needed = ((1.0 - fraction) * sups.len() as f64).floor() as usize;
        if let Some(&s) = sups.get(needed) {
            if !s.is_finite() {
                return Err(Error::Domain("too many trajectories exploded to find a radius".into()));
            }
            while radius < s {
                radius *= 2.0;
            }
        }
    }
    Ok(radius)
}

/// Shared settings of the convergence experiments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSetup {
    pub driver: BrownianDriver,
    pub x0s: Vec<Vec<f64>>,
    pub horizon: f64,
    pub stride: usize,
    /// Level-set radius; `None` picks [`tail_radius`] over all simulated levels.
    pub radius: Option<f64>,
    pub q: f64,
    /// Halton points for ball norms.
    pub points: usize,
}

impl ExperimentSetup {
    fn run(&self, f: &CoefficientField) -> Result<FlowEnsemble> {
        flow::integrate(f, &self.driver, &self.x0s, Pairing::Diagonal, self.horizon, self.stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CauchyRow {
    pub k: u32,
    pub l: u32,
    pub delta_kl: f64,
    pub lhs: StabilityValue,
    pub rhs: StabilityBound,
    /// `lhs / rhs`: the multiplicative constant the bound needs here.
    pub fitted_constant: f64,
    pub metric: MetricEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CauchyTable {
    pub family: String,
    pub radius: f64,
    pub rows: Vec<CauchyRow>,
    /// Largest over smallest fitted constant.
    pub constant_spread: f64,
    pub metric_decreasing: bool,
}

impl CauchyTable {
    /// CSV with columns `k,l,delta_kl,lhs,rhs,metric`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,l,delta_kl,lhs,rhs,metric")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{:e}",
                r.k, r.l, r.delta_kl, r.lhs.estimate.value, r.rhs.value, r.metric.estimate.value
            )?;
        }
        Ok(())
    }
}

fn mollified(raw: &CoefficientField, kernel: Kernel, k: u32) -> Result<CoefficientField> {
    mollify(raw, &MollifierSpec::new(kernel, k)?)
}

/// Consecutive level pairs `(k_i, k_{i+1})`: level distance, stability
/// functional at `delta = delta_kl`, its bound and the convergence metric, all
/// under one driver.
pub fn cauchy_experiment(
    raw: &CoefficientField,
    m: &ReferenceMeasure,
    levels: &[u32],
    kernel: Kernel,
    setup: &ExperimentSetup,
) -> Result<CauchyTable> {
    if levels.len() < 2 {
        return Err(Error::InvalidParameter("need at least two levels".into()));
    }
    let fields: Vec<CoefficientField> = levels.iter().map(|&k| mollified(raw, kernel, k)).collect::<Result<_>>()?;
    let ensembles: Vec<FlowEnsemble> = fields.iter().map(|f| setup.run(f)).collect::<Result<_>>()?;
    let radius = match setup.radius {
        Some(r) => r,
        None => tail_radius(&ensembles, 0.05)?,
    };
    let mut rows = Vec::new();
    for i in 0..levels.len() - 1 {
        let (f, g) = (&fields[i], &fields[i + 1]);
        let rhs = bound_with(f, g, radius, None, setup.q, setup.points)?;
        let delta_kl = rhs.delta;
        let lhs = stability_functional(&ensembles[i], &ensembles[i + 1], m, radius, delta_kl, raw.block())?;
        let metric = flow::convergence_metric(&ensembles[i], &ensembles[i + 1], m)?;
        rows.push(CauchyRow {
            k: levels[i],
            l: levels[i + 1],
            delta_kl,
            fitted_constant: lhs.estimate.value / rhs.value,
            lhs,
            rhs,
            metric,
        });
    }
    let (lo, hi) = rows.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r.fitted_constant), hi.max(r.fitted_constant)));
    let metric_decreasing = rows.windows(2).all(|w| w[1].metric.estimate.value < w[0].metric.estimate.value);
    Ok(CauchyTable {
        family: raw.name().to_string(),
        radius,
        rows,
        constant_spread: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        metric_decreasing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub level: u32,
    pub kernels: (Kernel, Kernel),
    /// Metric between the two schemes at `level`.
    pub metric: MetricEstimate,
    /// Metric between levels `level / 2` and `level` of the first kernel.
    pub cauchy_gap: MetricEstimate,
    pub below_gap: bool,
}

/// Compares the flows of two mollification schemes at the same level.
pub fn uniqueness_experiment(
    raw: &CoefficientField,
    m: &ReferenceMeasure,
    level: u32,
    kernels: (Kernel, Kernel),
    setup: &ExperimentSetup,
) -> Result<UniquenessReport> {
    if level < 2 {
        return Err(Error::InvalidParameter("level must be at least 2".into()));
    }
    let a = setup.run(&mollified(raw, kernels.0, level)?)?;
    let b = setup.run(&mollified(raw, kernels.1, level)?)?;
    let half = setup.run(&mollified(raw, kernels.0, level / 2)?)?;
    let metric = flow::convergence_metric(&a, &b, m)?;
    let cauchy_gap = flow::convergence_metric(&half, &a, m)?;
    Ok(UniquenessReport {
        level,
        kernels,
        below_gap: metric.estimate.value < cauchy_gap.estimate.value,
        metric,
        cauchy_gap,
    })
}
