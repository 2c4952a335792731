//! The acceptance suite: ten numbered checks at desk-scale budgets. Shared by
//! the `verify-all` subcommand and the `acceptance` test target.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{GridFunction, lambda0, lambda0_closed_form, maximal_exp_check, maximal_lp_check, random_piecewise};
use crate::coefficients::mollifier::{cube_grid, mollify, weight_mollification_check};
use crate::coefficients::{CoefficientField, Family, Kernel, MollifierSpec};
use crate::density::{
    density_bound_rhs, fit_density_constant, horizon_t0, integrate_with_density, lp_density_norm, lp_norm_sup,
    track_density, uniform_density_bound, StochasticSum,
};
use crate::derivative::{
    derivative_flow, difference_flow, lift, verify_hypotheses, weak_derivative_convergence, LiftedMeasures,
};
use crate::error::Result;
use crate::flow::{
    coefficient_norms, compose_time_shift, initial_points, integrate, level_set_check, BrownianDriver, LevelSetInputs,
    Pairing,
};
use crate::measure::ReferenceMeasure;
use crate::seed;
use crate::stability::{cauchy_experiment, uniqueness_experiment, ExperimentSetup};

/// Multiplies Monte Carlo budgets. Structural sizes (grids, level sets, the
/// number of random test functions) stay fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Budget {
    pub seed: u64,
    pub scale: f64,
}

impl Budget {
    pub fn new(seed: u64, scale: f64) -> Self {
        Self { seed, scale }
    }

    fn count(&self, base: usize) -> usize {
        ((base as f64 * self.scale).round() as usize).max(16)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub pass: bool,
    pub limit_seconds: f64,
    pub details: Value,
    /// Wall time; kept out of the serialized summary so it stays reproducible.
    #[serde(skip)]
    pub runtime: Duration,
}

impl CriterionResult {
    pub fn within_limit(&self) -> bool {
        self.runtime.as_secs_f64() <= self.limit_seconds
    }

    /// `PASS`/`FAIL`, name, runtime against its limit.
    pub fn line(&self) -> String {
        let verdict = if self.pass && self.within_limit() { "PASS" } else { "FAIL" };
        let note = match (self.pass, self.within_limit()) {
            (true, false) => " (over time limit)",
            _ => "",
        };
        format!(
            "{verdict} criterion {:>2}: {} [{:.1}s / {:.0}s]{note}",
            self.id,
            self.name,
            self.runtime.as_secs_f64(),
            self.limit_seconds
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub version: String,
    pub budget: Budget,
    pub criteria: Vec<CriterionResult>,
    pub all_pass: bool,
}

impl Summary {
    /// Runtimes, for a separate report next to the reproducible summary.
    pub fn timings(&self) -> Value {
        Value::Array(
            self.criteria
                .iter()
                .map(|c| json!({"id": c.id, "seconds": c.runtime.as_secs_f64(), "within_limit": c.within_limit()}))
                .collect(),
        )
    }
}

type Check = fn(&Budget) -> Result<(bool, Value)>;

const CRITERIA: [(u8, &str, f64, Check); 10] = [
    (1, "translation flow density oracle", 10.0, translation_oracle),
    (2, "linear drift density oracle", 5.0, linear_drift_oracle),
    (3, "L^p density bound per catalog family", 720.0, lp_density_bound),
    (4, "uniform and structured density bounds over mollification levels", 300.0, uniform_bounds),
    (5, "level-set estimate", 120.0, level_sets),
    (6, "maximal-function inequalities and ring constant", 60.0, maximal_suite),
    (7, "weight mollification inequality", 30.0, weight_mollification),
    (8, "Cauchy and uniqueness convergence", 300.0, cauchy_uniqueness),
    (9, "weak differentiability", 600.0, weak_differentiability),
    (10, "flow property and determinism", 60.0, flow_determinism),
];

/// Runs one criterion by number.
pub fn run_criterion(id: u8, budget: &Budget) -> Option<CriterionResult> {
    let (id, name, limit, check) = CRITERIA.iter().copied().find(|c| c.0 == id)?;
    let start = Instant::now();
    let (pass, details) = match check(budget) {
        Ok(v) => v,
        Err(e) => (false, json!({"error": e.to_string()})),
    };
    Some(CriterionResult { id, name: name.to_string(), pass, limit_seconds: limit, details, runtime: start.elapsed() })
}

/// Runs every criterion, calling `progress` after each.
pub fn verify_all(budget: &Budget, mut progress: impl FnMut(&CriterionResult)) -> Summary {
    let mut criteria = Vec::new();
    for (id, ..) in CRITERIA {
        let r = run_criterion(id, budget).expect("listed criterion");
        progress(&r);
        criteria.push(r);
    }
    let all_pass = criteria.iter().all(|c| c.pass);
    Summary { version: env!("CARGO_PKG_VERSION").to_string(), budget: *budget, criteria, all_pass }
}

fn measure_for(fam: &Family) -> Result<ReferenceMeasure> {
    ReferenceMeasure::new(fam.dim(), fam.reference_alpha(2.0).0)
}

/// The raw field, or its bump mollification at level `k` when the family is rough.
fn simulated_field(fam: &Family, k: u32) -> Result<(CoefficientField, CoefficientField, MollifierSpec)> {
    let raw = fam.build()?;
    let spec = MollifierSpec::bump(k)?;
    let f = if fam.needs_mollification() { mollify(&raw, &spec)? } else { raw.clone() };
    Ok((raw, f, spec))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn translation_errors(m: &ReferenceMeasure, x0: &[Vec<f64>], driver: &BrownianDriver) -> Result<Vec<f64>> {
    let f = Family::Translation { dim: 1, scale: 1.0 }.build()?;
    let e = integrate(&f, driver, x0, Pairing::Diagonal, 1.0, 1)?;
    let d = track_density(&e, &f, m, driver, StochasticSum::Corrected)?;
    let lambda = |x: f64| -m.alpha() * (1.0 + x * x).ln();
    Ok((0..e.len())
        .map(|j| {
            let x = x0[j][0];
            (0..e.grid.records())
                .map(|r| {
                    let oracle = (lambda(e.trajectories[j].state(r, 1)[0]) - lambda(x)).exp();
                    (d.rho_tilde(j, r) / oracle - 1.0).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect())
}

fn translation_oracle(b: &Budget) -> Result<(bool, Value)> {
    let m = ReferenceMeasure::new(1, 1.5)?;
    let paths = b.count(1000);
    let x0 = initial_points(&m, b.seed, "c1.x0", paths)?;
    let fine = BrownianDriver::new(1, 2f64.powi(-11), seed::derive_seed(b.seed, "c1.driver", 0), paths)?;
    let coarse = fine.coarsened(2)?;
    let errs = translation_errors(&m, &x0, &coarse)?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let med = median(errs);
    let med_fine = median(translation_errors(&m, &x0, &fine)?);
    let ratio = med / med_fine;
    let pass = worst < 1e-2 && (1.7..=2.4).contains(&ratio);
    Ok((pass, json!({"paths": paths, "dt": coarse.dt(), "worst": worst, "median": med, "median_half_dt": med_fine, "median_ratio": ratio})))
}

fn linear_drift_oracle(b: &Budget) -> Result<(bool, Value)> {
    let alpha = 1.5;
    let m = ReferenceMeasure::new(1, alpha)?;
    let f = Family::Ou { dim: 1, theta: 1.0, s: 0.0 }.build()?;
    let lambda = |x: f64| -alpha * (1.0 + x * x).ln();
    let paths = b.count(1000);
    let mut pass = true;
    let mut rows = Vec::new();
    for dt in [2f64.powi(-8), 2f64.powi(-10)] {
        let x0 = initial_points(&m, b.seed, "c2.x0", paths)?;
        let d = BrownianDriver::new(1, dt, seed::derive_seed(b.seed, "c2.driver", 0), paths)?;
        let (e, tr) = integrate_with_density(&f, &m, &d, &x0, Pairing::Diagonal, 1.0, 1)?;
        let mut worst: f64 = 0.0;
        for j in 0..e.len() {
            let x = x0[j][0];
            for r in 0..e.grid.records() {
                let t = e.grid.record_time(r);
                let oracle = (-t + lambda((-t).exp() * x) - lambda(x)).exp();
                worst = worst.max((tr.rho_tilde(j, r) / oracle - 1.0).abs());
            }
        }
        pass &= worst < 10.0 * dt;
        rows.push(json!({"dt": dt, "worst_relative_error": worst, "limit": 10.0 * dt}));
    }
    Ok((pass, json!({"paths": paths, "runs": rows})))
}

/// Points for constant fits: a cube grid plus draws from the measure.
fn fit_points(n: usize, m: &ReferenceMeasure, b: &Budget, tag: &str) -> Result<Vec<Vec<f64>>> {
    let per_axis = match n {
        1 => 61,
        2 => 21,
        _ => 11,
    };
    let mut pts = cube_grid(n, 3.0, per_axis);
    pts.extend(initial_points(m, b.seed, tag, 200)?);
    Ok(pts)
}

/// `dt = 2^{floor(log2 T0) - 3}` and the largest grid time not above `T0`.
fn grid_below(t0: f64) -> (f64, f64) {
    let dt = 2f64.powi((t0.log2().floor() as i32) - 3);
    (dt, (t0 / dt).floor() * dt)
}

fn lp_density_bound(b: &Budget) -> Result<(bool, Value)> {
    let p = 2.0;
    let p0 = 1.5;
    let paths = b.count(10_000);
    let mut pass = true;
    let mut rows = Vec::new();
    for (i, fam) in Family::catalog().into_iter().enumerate() {
        let start = Instant::now();
        let (raw, f, spec) = simulated_field(&fam, 8)?;
        let m = measure_for(&fam)?;
        let pts = fit_points(f.dim(), &m, b, "c3.fit")?;
        let fit = fit_density_constant(&raw, &[(spec, f.clone())], &m, p, &pts)?;
        let t0 = horizon_t0(fit.c0, p, p0, f.block().is_some());
        let (dt, horizon) = grid_below(t0);
        let x0 = initial_points(&m, b.seed, "c3.x0", paths)?;
        let d = BrownianDriver::new(f.noise_dim(), dt, seed::derive_seed(b.seed, "c3.driver", i as u64), paths)?;
        let (_, tr) = integrate_with_density(&f, &m, &d, &x0, Pairing::Diagonal, horizon, 1)?;
        let times: Vec<f64> = (0..tr.grid.records()).map(|r| tr.grid.record_time(r)).collect();
        let rhs = density_bound_rhs(&f, &m, p, &times, b.count(40_000), &mut seed::stream(b.seed, "c3.rhs", i as u64))?;
        let mut worst_margin = f64::INFINITY;
        let mut worst_norm: f64 = 0.0;
        for r in 0..tr.grid.records() {
            let n = lp_density_norm(&tr, &m, p, r)?;
            worst_margin = worst_margin.min(rhs.value + 2.0 * n.norm.se - n.norm.value);
            worst_norm = worst_norm.max(n.norm.value);
        }
        let seconds = start.elapsed().as_secs_f64();
        let ok = !rhs.divergent && worst_margin >= 0.0 && seconds <= 120.0;
        pass &= ok;
        rows.push(json!({
            "family": fam.label(), "mollified": fam.needs_mollification(), "c0": fit.c0, "t0": t0,
            "dt": dt, "horizon": horizon, "paths": paths, "max_norm": worst_norm, "rhs": rhs.value,
            "rhs_divergent": rhs.divergent, "min_margin": worst_margin, "within_two_minutes": seconds <= 120.0, "pass": ok,
        }));
    }
    Ok((pass, json!({"p": p, "p0": p0, "families": rows})))
}

fn uniform_bounds(b: &Budget) -> Result<(bool, Value)> {
    let p = 2.0;
    let p0 = 1.5;
    let paths = b.count(4000);
    let mut pass = true;
    let mut rows = Vec::new();
    for (i, fam) in [Family::LogSingular { dim: 3, beta: 0.5, s: 0.5 }, Family::PartialSobolev { s1: 0.5, s2: 0.5, a: 1.0, step: 0.5 }]
        .into_iter()
        .enumerate()
    {
        let raw = fam.build()?;
        let (alpha, alpha1) = fam.reference_alpha(2.0);
        let m = ReferenceMeasure::new(raw.dim(), alpha)?;
        let levels: Vec<(MollifierSpec, CoefficientField)> = [2u32, 4, 8, 16]
            .iter()
            .map(|&k| {
                let s = MollifierSpec::bump(k)?;
                Ok((s, mollify(&raw, &s)?))
            })
            .collect::<Result<_>>()?;
        let pts = fit_points(raw.dim(), &m, b, "c4.fit")?;
        let fit = fit_density_constant(&raw, &levels, &m, p, &pts)?;
        let ub = uniform_density_bound(&raw, &m, alpha1, p, p0, fit.c0, b.count(40_000), &mut seed::stream(b.seed, "c4.ub", i as u64))?;
        let (dt, horizon) = grid_below(ub.t0);
        let x0 = initial_points(&m, b.seed, "c4.x0", paths)?;
        let d = BrownianDriver::new(raw.noise_dim(), dt, seed::derive_seed(b.seed, "c4.driver", i as u64), paths)?;
        let mut per_level = Vec::new();
        let mut ok = ub.value.is_finite() && !ub.divergent;
        for (s, f) in &levels {
            let (_, tr) = integrate_with_density(f, &m, &d, &x0, Pairing::Diagonal, horizon, 1)?;
            let sup = lp_norm_sup(&tr, &m, p, horizon)?;
            let below = sup.norm.value <= ub.value + 2.0 * sup.norm.se;
            ok &= below;
            per_level.push(json!({"k": s.level, "sup_norm": sup.norm.value, "se": sup.norm.se, "below": below}));
        }
        pass &= ok;
        rows.push(json!({
            "family": fam.label(), "structured": raw.block().is_some(), "c0": fit.c0, "t0": ub.t0, "dt": dt,
            "horizon": horizon, "bound": ub.value, "integrals": ub.integrals.len(), "divergent": ub.divergent,
            "levels": per_level, "pass": ok,
        }));
    }
    Ok((pass, json!({"p": p, "p0": p0, "paths": paths, "families": rows})))
}

fn level_sets(b: &Budget) -> Result<(bool, Value)> {
    let paths = b.count(4000);
    let mut pass = true;
    let mut rows = Vec::new();
    for (i, fam) in Family::catalog().into_iter().enumerate() {
        let (_, f, _) = simulated_field(&fam, 8)?;
        let m = measure_for(&fam)?;
        let x0 = initial_points(&m, b.seed, "c5.x0", paths)?;
        let d = BrownianDriver::new(f.noise_dim(), 1.0 / 128.0, seed::derive_seed(b.seed, "c5.driver", i as u64), paths)?;
        let (e, tr) = integrate_with_density(&f, &m, &d, &x0, Pairing::Diagonal, 1.0, 16)?;
        let lambda_pt = lp_norm_sup(&tr, &m, 2.0, 1.0)?.norm.value;
        let (sigma_l2q, drift_lq) = coefficient_norms(&f, &m, 2.0, b.count(20_000), &mut seed::stream(b.seed, "c5.norms", i as u64))?;
        let inputs = LevelSetInputs { horizon: 1.0, lambda_pt, sigma_l2q, drift_lq };
        let mut radii = Vec::new();
        let mut constant = f64::NAN;
        for r in [2.0, 5.0, 10.0, 20.0] {
            let rep = level_set_check(&e, &m, r, Some(&inputs))?;
            pass &= rep.pass;
            constant = rep.constant;
            radii.push(json!({"radius": r, "empirical": rep.empirical.value, "bound": rep.bound, "pass": rep.pass}));
        }
        rows.push(json!({"family": fam.label(), "lambda_pt": lambda_pt, "constant": constant, "radii": radii}));
    }
    Ok((pass, json!({"paths": paths, "families": rows})))
}

/// Random-function checks of the `L^p` and exponential maximal inequalities:
/// `functions` piecewise-constant grid functions per `(n, p, delta)` and per
/// `(n, theta, delta)`. Passes when every single check passes.
pub fn maximal_inequality_suite(
    dims: &[usize],
    ps: &[f64],
    deltas: &[f64],
    thetas: &[f64],
    functions: usize,
    rng: &mut impl Rng,
) -> Result<(bool, Value)> {
    let mut pass = true;
    let mut lp_rows = Vec::new();
    let mut exp_rows = Vec::new();
    let mut tally = |rows: &mut Vec<Value>, key: (&str, f64), n: usize, delta: f64, check: &mut dyn FnMut(&GridFunction) -> Result<(bool, f64)>, rng: &mut dyn rand::RngCore| -> Result<()> {
        let h = if n == 1 { delta / 8.0 } else { delta / 4.0 };
        let (mut passed, mut worst) = (0, 0.0f64);
        for _ in 0..functions {
            let pieces = rng.random_range(1..=10);
            let g = random_piecewise(n, 2.0, delta, h, pieces, rng)?;
            let (ok, ratio) = check(&g)?;
            passed += ok as usize;
            worst = worst.max(ratio);
        }
        pass &= passed == functions;
        rows.push(json!({"n": n, key.0: key.1, "delta": delta, "passed": passed, "of": functions, "worst_ratio": worst}));
        Ok(())
    };
    for &n in dims {
        let m = ReferenceMeasure::new(n, 1.5)?;
        for &delta in deltas {
            for &p in ps {
                tally(&mut lp_rows, ("p", p), n, delta, &mut |g| maximal_lp_check(g, &m, delta, p).map(|r| (r.pass, r.ratio)), rng)?;
            }
            for &theta in thetas {
                tally(&mut exp_rows, ("theta", theta), n, delta, &mut |g| maximal_exp_check(g, &m, delta, theta).map(|r| (r.pass, r.ratio)), rng)?;
            }
        }
    }
    Ok((pass, json!({"lp": lp_rows, "exp": exp_rows})))
}

fn maximal_suite(b: &Budget) -> Result<(bool, Value)> {
    let mut rng = seed::stream(b.seed, "c6.functions", 0);
    let (mut pass, report) = maximal_inequality_suite(&[1, 2], &[1.5, 2.0, 4.0], &[0.5, 1.0, 2.0], &[0.25, 0.5], 200, &mut rng)?;
    let mut ring = Vec::new();
    for n in [1usize, 2, 3] {
        for alpha in [0.5 * n as f64 + 0.5, 0.5 * n as f64 + 2.5] {
            let m = ReferenceMeasure::new(n, alpha)?;
            for delta in [1.0, 2.0, 5.0] {
                let scan = lambda0(&m, delta)?.value;
                let exact = lambda0_closed_form(alpha, delta)?;
                let rel = (scan / exact - 1.0).abs();
                pass &= rel < 1e-6;
                ring.push(json!({"n": n, "alpha": alpha, "delta": delta, "scan": scan, "closed_form": exact, "relative_error": rel}));
            }
        }
    }
    Ok((pass, json!({"inequalities": report, "lambda0": ring})))
}

fn weight_mollification(_: &Budget) -> Result<(bool, Value)> {
    let mut pass = true;
    let mut rows = Vec::new();
    for (n, per_axis) in [(1usize, 401), (2, 41), (3, 13)] {
        let alpha = 0.5 * n as f64 + 2.5;
        let m = ReferenceMeasure::new(n, alpha)?;
        let pts = cube_grid(n, 8.0, per_axis);
        for k in [1u32, 2, 4, 8] {
            let rep = weight_mollification_check(&m, &MollifierSpec::bump(k)?, &pts)?;
            pass &= rep.pass;
            rows.push(json!({"n": n, "alpha": alpha, "k": k, "points": rep.points, "min_margin": rep.min_margin, "pass": rep.pass}));
        }
    }
    Ok((pass, json!({"grids": rows})))
}

fn cauchy_uniqueness(b: &Budget) -> Result<(bool, Value)> {
    let paths = b.count(1000);
    let mut pass = true;
    let mut rows = Vec::new();
    for (i, fam) in [
        Family::LogSingular { dim: 3, beta: 0.5, s: 0.5 },
        Family::PartialSobolev { s1: 0.5, s2: 0.5, a: 1.0, step: 0.5 },
        Family::RoughSobolev { gamma: 0.5, s: 0.5 },
    ]
    .into_iter()
    .enumerate()
    {
        let raw = fam.build()?;
        let m = measure_for(&fam)?;
        let setup = ExperimentSetup {
            driver: BrownianDriver::new(raw.noise_dim(), 1.0 / 64.0, seed::derive_seed(b.seed, "c8.driver", i as u64), paths)?,
            x0s: initial_points(&m, b.seed, "c8.x0", paths)?,
            horizon: 1.0,
            stride: 1,
            radius: None,
            q: 2.0,
            points: b.count(100_000),
        };
        let table = cauchy_experiment(&raw, &m, &[2, 4, 8, 16], Kernel::Bump, &setup)?;
        let uniq = uniqueness_experiment(&raw, &m, 16, (Kernel::Bump, Kernel::FlatBump), &setup)?;
        let ok = table.metric_decreasing && uniq.below_gap;
        pass &= ok;
        let pairs: Vec<Value> = table
            .rows
            .iter()
            .map(|r| {
                json!({"k": r.k, "l": r.l, "delta_kl": r.delta_kl, "lhs": r.lhs.estimate.value, "rhs": r.rhs.value,
                       "fitted_constant": r.fitted_constant, "metric": r.metric.estimate.value, "se": r.metric.estimate.se})
            })
            .collect();
        rows.push(json!({
            "family": fam.label(), "radius": table.radius, "pairs": pairs, "constant_spread": table.constant_spread,
            "metric_decreasing": table.metric_decreasing, "uniqueness_metric": uniq.metric.estimate.value,
            "final_gap": uniq.cauchy_gap.estimate.value, "pass": ok,
        }));
    }
    Ok((pass, json!({"paths": paths, "families": rows})))
}

fn weak_differentiability(b: &Budget) -> Result<(bool, Value)> {
    let epsilons = [0.5, 0.25, 0.125, 0.0625];
    let paths = b.count(2000);
    let dt = 1.0 / 64.0;

    let linear = lift(&Family::catalog()[0].build()?)?;
    let lm = LiftedMeasures::default_for(linear.dim(), 2.0)?;
    let starts = initial_points(&lm.joint, b.seed, "c9.linear", paths)?;
    let driver = BrownianDriver::new(linear.base.noise_dim(), dt, seed::derive_seed(b.seed, "c9.driver", 0), paths)?;
    let y = derivative_flow(&linear, &driver, &starts, 1.0, 1)?;
    let mut gap: f64 = 0.0;
    for &eps in &epsilons {
        let ye = difference_flow(&linear, eps, &driver, &starts, 1.0, 1)?;
        for (u, v) in y.trajectories.iter().zip(&ye.trajectories) {
            for (p, q) in u.states.chunks(y.dim).zip(v.states.chunks(y.dim)) {
                for i in linear.dim()..y.dim {
                    gap = gap.max((p[i] - q[i]).abs());
                }
            }
        }
    }
    let exact = gap < 1e-10;

    let mut runs = Vec::new();
    let mut trends_ok = true;
    for (i, fam) in [Family::SmoothNonlinear { dim: 1, a: 0.5, s: 0.5 }, Family::RoughSobolev { gamma: 0.5, s: 0.5 }]
        .into_iter()
        .enumerate()
    {
        let sys = lift(&fam.build()?)?;
        let lm = LiftedMeasures::default_for(sys.dim(), 2.0)?;
        let starts = initial_points(&lm.joint, b.seed, "c9.starts", paths)?;
        let driver = BrownianDriver::new(1, dt, seed::derive_seed(b.seed, "c9.driver", 1 + i as u64), paths)?;
        let t = weak_derivative_convergence(&sys, &epsilons, &driver, &starts, &lm.joint, 1.0, 1)?;
        let ok = t.strictly_decreasing && t.reduction < 0.25;
        trends_ok &= ok;
        let mut rng = seed::stream(b.seed, "c9.hypotheses", i as u64);
        let h = verify_hypotheses(&sys, &lm, 1.5, &[0.5, 0.25, 0.125], b.count(10_000), 10_000, &mut rng)?;
        trends_ok &= h.pass;
        runs.push(json!({
            "family": fam.label(),
            "metrics": t.rows.iter().map(|r| json!({"epsilon": r.epsilon, "metric": r.metric.value, "se": r.metric.se})).collect::<Vec<_>>(),
            "strictly_decreasing": t.strictly_decreasing, "final_over_first": t.reduction,
            "drift_domination": h.domination.drift_pass, "sigma_domination": h.domination.sigma_pass,
            "domination_samples": h.domination.samples, "epsilon_band": h.band_ratio, "hypotheses_pass": h.pass, "pass": ok && h.pass,
        }));
    }
    let pass = exact && trends_ok;
    Ok((pass, json!({"paths": paths, "dt": dt, "linear_max_gap": gap, "linear_exact": exact, "bases": runs})))
}

fn flow_determinism(b: &Budget) -> Result<(bool, Value)> {
    let mut pass = true;
    let mut rows = Vec::new();
    let paths = b.count(40);
    for (i, fam) in Family::catalog().into_iter().enumerate() {
        let f = fam.build()?;
        let n = f.dim();
        let m = measure_for(&fam)?;
        let x0 = initial_points(&m, b.seed, "c10.x0", paths)?;
        let d = BrownianDriver::new(f.noise_dim(), 1.0 / 128.0, seed::derive_seed(b.seed, "c10.driver", i as u64), paths)?;
        let direct = integrate(&f, &d, &x0, Pairing::Diagonal, 1.0, 1)?;
        let first = integrate(&f, &d, &x0, Pairing::Diagonal, 0.25, 1)?;
        let composed = compose_time_shift(&f, &first, &d, 0.25, 0.75, 1)?;
        let offset = first.grid.records() - 1;
        let mut bitwise = true;
        for j in 0..direct.len() {
            for r in 0..composed.grid.records() {
                let u = direct.trajectories[j].state(r + offset, n);
                let v = composed.trajectories[j].state(r, n);
                bitwise &= u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits());
            }
        }
        let (_, f_track, _) = simulated_field(&fam, 8)?;
        let bytes = || -> Result<Vec<u8>> {
            let (e, tr) = integrate_with_density(&f_track, &m, &d, &x0, Pairing::Diagonal, 0.5, 4)?;
            let mut out = Vec::new();
            e.write_csv(&mut out)?;
            tr.write_csv(&e, &mut out)?;
            Ok(out)
        };
        let identical = bytes()? == bytes()?;
        pass &= bitwise && identical;
        rows.push(json!({"family": fam.label(), "compose_bitwise": bitwise, "repeat_identical": identical}));
    }
    Ok((pass, json!({"paths": paths, "families": rows})))
}
