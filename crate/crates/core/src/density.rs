//! Pathwise Radon-Nikodym densities of the flow.
//!
//! Along each trajectory, `rho~_t = exp(S_t + A_t)` with the left-point sums
//! `S = sum <Lambda_1(X), dB>` and `A = sum Lambda_2(X) dt`. Push-forward
//! functionals use the change of variables `rho_t(X_t(x)) = 1 / rho~_t(x)`:
//!
//! - `||rho_t||^p_{L^p(P x mu)} = E int rho~_t^{1-p} dmu`,
//! - `E int rho_t |log rho_t| dmu = E int |log rho~_t| dmu`.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::coefficients::mollifier::{convolve, MollifierSpec};
use crate::coefficients::{lambda1_into, lambda2_from, CoefficientField, Evaluation};
use crate::error::{Error, Result};
use crate::flow::{self, BrownianDriver, FlowEnsemble, Observer, Pairing, TimeGrid};
use crate::linalg::norm_sq;
use crate::measure::ReferenceMeasure;
use crate::stats::{Accumulator, Estimate};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityTrack {
    pub grid: TimeGrid,
    /// `S` at recorded times, `[trajectory][record]`.
    pub stochastic: Vec<Vec<f64>>,
    /// `A` at recorded times, `[trajectory][record]`.
    pub time: Vec<Vec<f64>>,
    /// Lambda evaluation failed somewhere along the path.
    pub failed: Vec<bool>,
    pub exploded: Vec<bool>,
}

impl DensityTrack {
    pub fn len(&self) -> usize {
        self.stochastic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stochastic.is_empty()
    }

    pub fn log_rho(&self, j: usize, record: usize) -> f64 {
        self.stochastic[j][record] + self.time[j][record]
    }

    pub fn rho_tilde(&self, j: usize, record: usize) -> f64 {
        self.log_rho(j, record).exp()
    }

    pub fn usable(&self, j: usize) -> bool {
        !self.failed[j] && !self.exploded[j]
    }

    pub fn excluded(&self) -> usize {
        (0..self.len()).filter(|&j| !self.usable(j)).count()
    }

    /// CSV rows `omega_index,x_index,t,rho_tilde,S,A`.
    pub fn write_csv<W: Write>(&self, e: &FlowEnsemble, mut w: W) -> Result<()> {
        writeln!(w, "omega_index,x_index,t,rho_tilde,S,A")?;
        for (j, t) in e.trajectories.iter().enumerate() {
            for r in 0..self.grid.records() {
                writeln!(
                    w,
                    "{},{},{},{:e},{:e},{:e}",
                    t.omega,
                    t.x_index,
                    self.grid.record_time(r),
                    self.rho_tilde(j, r),
                    self.stochastic[j][r],
                    self.time[j][r]
                )?;
            }
        }
        Ok(())
    }
}

/// Discretization of the stochastic integral `int <Lambda_1(X), dB>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StochasticSum {
    /// `sum <Lambda_1(X_i), dB_i>`.
    LeftPoint,
    /// Adds the zero-mean left-point term
    /// `(1/2) sum_{k,l} G_kl (dB_k dB_l - delta_kl dt)` with
    /// `G_kl = <sigma^{.k}, grad Lambda_1^l>`, where second derivatives of
    /// sigma and unavailable first derivatives are dropped from
    /// `grad Lambda_1`. Exact second-order term when sigma is affine.
    #[default]
    Corrected,
}

struct Accumulate {
    measure: ReferenceMeasure,
    block: Option<usize>,
    scheme: StochasticSum,
    lambda1: Vec<f64>,
    grad: Vec<f64>,
    s: f64,
    a: f64,
    s_rec: Vec<f64>,
    a_rec: Vec<f64>,
    failed: bool,
}

impl Accumulate {
    fn new(measure: ReferenceMeasure, block: Option<usize>, scheme: StochasticSum, m: usize, records: usize) -> Self {
        Self {
            measure,
            block,
            scheme,
            lambda1: vec![0.0; m],
            grad: Vec::new(),
            s: 0.0,
            a: 0.0,
            s_rec: Vec::with_capacity(records),
            a_rec: Vec::with_capacity(records),
            failed: false,
        }
    }

    #[inline]
    fn add(&mut self, x: &[f64], db: &[f64], dt: f64, e: &Evaluation) -> bool {
        if lambda1_into(e, &self.measure, x, &mut self.lambda1).is_err() {
            return false;
        }
        let l2 = match lambda2_from(e, &self.measure, x, self.block) {
            Ok(v) => v,
            Err(_) => return false,
        };
        let mut ds: f64 = self.lambda1.iter().zip(db).map(|(l, b)| l * b).sum();
        if self.scheme == StochasticSum::Corrected {
            ds += self.correction(x, db, dt, e);
        }
        self.s += ds;
        self.a += l2 * dt;
        true
    }
}

impl Accumulate {
    fn correction(&mut self, x: &[f64], db: &[f64], dt: f64, e: &Evaluation) -> f64 {
        let (n, m) = (e.dim(), e.noise_dim());
        let sq = 1.0 + norm_sq(x);
        self.grad.resize(n, 0.0);
        self.measure.grad_log_weight_into(x, &mut self.grad);
        let mut total = 0.0;
        for l in 0..m {
            for j in 0..n {
                // d_j Lambda_1^l without the second derivatives of sigma
                let mut d = 0.0;
                for i in 0..n {
                    let ds = e.dsigma_at(j, i, l);
                    if ds.is_finite() {
                        d += ds * self.grad[i];
                    }
                    d += e.sigma_at(i, l) * self.measure.hess_log_weight_entry(x, sq, j, i);
                }
                if d == 0.0 {
                    continue;
                }
                for k in 0..m {
                    let q = if k == l { db[k] * db[l] - dt } else { db[k] * db[l] };
                    total += e.sigma_at(j, k) * d * q;
                }
            }
        }
        0.5 * total
    }
}

impl Observer for Accumulate {
    fn step(&mut self, _: usize, x: &[f64], db: &[f64], dt: f64, e: &Evaluation, ok: bool) {
        if self.failed {
            return;
        }
        if !ok || !self.add(x, db, dt, e) {
            self.failed = true;
        }
    }

    fn record(&mut self) {
        self.s_rec.push(self.s);
        self.a_rec.push(self.a);
    }
}

fn finish(e: &FlowEnsemble, obs: Vec<Accumulate>) -> DensityTrack {
    let records = e.grid.records();
    let mut track = DensityTrack {
        grid: e.grid,
        stochastic: Vec::with_capacity(obs.len()),
        time: Vec::with_capacity(obs.len()),
        failed: Vec::with_capacity(obs.len()),
        exploded: e.trajectories.iter().map(|t| t.exploded).collect(),
    };
    for mut o in obs {
        o.s_rec.resize(records, f64::NAN);
        o.a_rec.resize(records, f64::NAN);
        track.stochastic.push(o.s_rec);
        track.time.push(o.a_rec);
        track.failed.push(o.failed);
    }
    track
}

fn check(field: &CoefficientField, m: &ReferenceMeasure) -> Result<()> {
    if field.dim() != m.dim() {
        return Err(Error::Dimension(format!("field dim {} vs measure dim {}", field.dim(), m.dim())));
    }
    Ok(())
}

/// Integrates the flow and accumulates `S`, `A` in the same pass.
pub fn integrate_with_density(
    field: &CoefficientField,
    m: &ReferenceMeasure,
    driver: &BrownianDriver,
    x0s: &[Vec<f64>],
    pairing: Pairing,
    horizon: f64,
    stride: usize,
) -> Result<(FlowEnsemble, DensityTrack)> {
    check(field, m)?;
    let grid = TimeGrid::new(horizon, driver.dt(), stride)?;
    let starts = flow::pairs(x0s, driver.omegas(), pairing)?;
    let (m_noise, block, records, measure) = (field.noise_dim(), field.block(), grid.records(), *m);
    let (e, obs) = flow::integrate_observed(field, driver, &starts, grid, true, |_| {
        Accumulate::new(measure, block, StochasticSum::Corrected, m_noise, records)
    })?;
    let track = finish(&e, obs);
    Ok((e, track))
}

/// Accumulates `S`, `A` along an ensemble already integrated with `driver`
/// at stride 1. With [`StochasticSum::Corrected`] the result equals the
/// fused pass of [`integrate_with_density`] bitwise.
pub fn track_density(
    e: &FlowEnsemble,
    field: &CoefficientField,
    m: &ReferenceMeasure,
    driver: &BrownianDriver,
    scheme: StochasticSum,
) -> Result<DensityTrack> {
    check(field, m)?;
    if e.grid.stride != 1 {
        return Err(Error::GridMisalignment("density tracking needs every grid state (stride 1)".into()));
    }
    if e.grid.dt != driver.dt() || e.dim != field.dim() {
        return Err(Error::Mismatch("ensemble was not produced by this driver and field".into()));
    }
    let n = e.dim;
    let mut obs = Vec::with_capacity(e.len());
    for t in &e.trajectories {
        let mut acc = Accumulate::new(*m, field.block(), scheme, field.noise_dim(), e.grid.records());
        let mut stream = driver.stream(t.omega);
        let mut db = vec![0.0; driver.noise_dim()];
        let mut ev = field.evaluation();
        acc.record();
        for i in 0..e.grid.steps {
            let x = t.state(i, n);
            if !x.iter().all(|v| v.is_finite()) {
                break;
            }
            stream.next_into(&mut db);
            let ok = field.eval_with_jacobian(x, &mut ev).is_ok();
            acc.step(i, x, &db, e.grid.dt, &ev, ok);
            if t.state(i + 1, n).iter().all(|v| v.is_finite()) {
                acc.record();
            }
        }
        obs.push(acc);
    }
    Ok(finish(e, obs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LpEstimate {
    pub p: f64,
    pub time: f64,
    /// `||rho_t||_{L^p(P x mu)}` with a delta-method standard error.
    pub norm: Estimate,
    /// `E int rho~^{1-p} dmu`.
    pub moment: Estimate,
    /// Largest single-sample share of the moment sum.
    pub max_share: f64,
    pub heavy_tail: bool,
    pub excluded: usize,
}

/// `||rho_t||_{L^p(P x mu)}` at a recorded time.
pub fn lp_density_norm(d: &DensityTrack, m: &ReferenceMeasure, p: f64, record: usize) -> Result<LpEstimate> {
    if !(p > 1.0) {
        return Err(Error::InvalidParameter(format!("p must exceed 1, got {p}")));
    }
    if record >= d.grid.records() {
        return Err(Error::InvalidParameter(format!("record {record} outside the grid")));
    }
    let mass = m.total_mass()?;
    let mut acc = Accumulator::new();
    for j in 0..d.len() {
        if d.usable(j) {
            acc.push(((1.0 - p) * d.log_rho(j, record)).exp());
        }
    }
    let moment = acc.estimate().scaled(mass);
    let norm = moment.map(|v| v.powf(1.0 / p), |v| v.powf(1.0 / p - 1.0) / p);
    let share = acc.max_share();
    Ok(LpEstimate {
        p,
        time: d.grid.record_time(record),
        norm,
        moment,
        max_share: share,
        heavy_tail: share > 0.5,
        excluded: d.excluded(),
    })
}

/// `sup_t ||rho_t||_p` over recorded times up to `until` (inclusive).
pub fn lp_norm_sup(d: &DensityTrack, m: &ReferenceMeasure, p: f64, until: f64) -> Result<LpEstimate> {
    let mut best: Option<LpEstimate> = None;
    for r in 0..d.grid.records() {
        if d.grid.record_time(r) > until + 1e-12 {
            break;
        }
        let e = lp_density_norm(d, m, p, r)?;
        if best.is_none_or(|b| e.norm.value > b.norm.value) {
            best = Some(e);
        }
    }
    best.ok_or_else(|| Error::MissingEstimate("no recorded time in range".into()))
}

/// `E int rho_t |log rho_t| dmu` through `E int |log rho~_t| dmu`.
pub fn entropy(d: &DensityTrack, m: &ReferenceMeasure, record: usize) -> Result<Estimate> {
    let mass = m.total_mass()?;
    let mut acc = Accumulator::new();
    for j in 0..d.len() {
        if d.usable(j) {
            acc.push(d.log_rho(j, record).abs());
        }
    }
    Ok(acc.estimate().scaled(mass))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityBound {
    pub p: f64,
    /// `sup_t int exp(t p^3 |Lambda_1|^2 - t p^2 Lambda_2) dmu` over the supplied times.
    pub sup_integral: Estimate,
    pub sup_time: f64,
    /// `mu(R^n)^{1/(p+1)} (sup integral)^{1/(p(p+1))}`.
    pub value: f64,
    pub max_share: f64,
    pub divergent: bool,
    pub nonfinite: u64,
}

/// Monte Carlo right-hand side of the `L^p` density estimate. The same
/// samples serve every time in `times`.
pub fn density_bound_rhs<R: Rng + ?Sized>(
    field: &CoefficientField,
    m: &ReferenceMeasure,
    p: f64,
    times: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<DensityBound> {
    check(field, m)?;
    if times.is_empty() {
        return Err(Error::InvalidParameter("no times given".into()));
    }
    let mass = m.total_mass()?;
    let mut e = field.evaluation();
    let mut l1 = vec![0.0; field.noise_dim()];
    let mut x = vec![0.0; m.dim()];
    let mut exponents = Vec::with_capacity(count);
    let mut nonfinite = 0;
    for _ in 0..count {
        m.sample_one(rng, &mut x);
        let v = field
            .eval_with_jacobian(&x, &mut e)
            .and_then(|_| lambda1_into(&e, m, &x, &mut l1))
            .and_then(|_| lambda2_from(&e, m, &x, field.block()))
            .map(|l2| p.powi(3) * norm_sq(&l1) - p * p * l2);
        match v {
            Ok(v) if v.is_finite() => exponents.push(v),
            _ => nonfinite += 1,
        }
    }
    let mut best: Option<(Estimate, f64, f64, bool)> = None;
    for &t in times {
        let mut acc = Accumulator::new();
        let mut first = Accumulator::new();
        let half = exponents.len() / 2;
        for (i, v) in exponents.iter().enumerate() {
            let w = (t * v).exp();
            acc.push(w);
            if i < half {
                first.push(w);
            }
        }
        let est = acc.estimate().scaled(mass);
        let share = acc.max_share();
        let unsettled = (first.mean() - acc.mean()).abs() > 0.25 * acc.mean();
        let divergent = share > 0.1 || unsettled || !est.value.is_finite();
        if best.is_none_or(|b| est.value > b.0.value || divergent) {
            best = Some((est, t, share, divergent || best.is_some_and(|b| b.3)));
        }
    }
    let (sup_integral, sup_time, max_share, divergent) = best.expect("times is non-empty");
    let value = mass.powf(1.0 / (p + 1.0)) * sup_integral.value.powf(1.0 / (p * (p + 1.0)));
    Ok(DensityBound { p, sup_integral, sup_time, value, max_share, divergent, nonfinite })
}

/// Smallest `C_0` with `p^3 |Lambda_1^k|^2 - p^2 Lambda_2^k <= C_0 p^3 Psi_k` at
/// every point and level, where `Psi_k` is `Phi_0 * chi_k`, or
/// `Phi_1 * chi_{1,k} + Phi_2 * chi_k` for structured fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantFit {
    pub c0: f64,
    /// Per level: `(k, fitted constant at that level alone)`.
    pub per_level: Vec<(u32, f64)>,
}

pub fn fit_density_constant(
    raw: &CoefficientField,
    levels: &[(MollifierSpec, CoefficientField)],
    m: &ReferenceMeasure,
    p: f64,
    points: &[Vec<f64>],
) -> Result<ConstantFit> {
    let mut per_level = Vec::new();
    let mut e_raw = raw.evaluation();
    for (spec, fk) in levels {
        let mut ek = fk.evaluation();
        let mut l1 = vec![0.0; fk.noise_dim()];
        let mut worst: f64 = 0.0;
        for x in points {
            fk.eval_with_jacobian(x, &mut ek)?;
            lambda1_into(&ek, m, x, &mut l1)?;
            let lhs = p.powi(3) * norm_sq(&l1) - p * p * lambda2_from(&ek, m, x, fk.block())?;
            if lhs <= 0.0 {
                continue;
            }
            let psi = mollified_phi(raw, spec, x, &mut e_raw)?;
            worst = worst.max(lhs / (p.powi(3) * psi));
        }
        per_level.push((spec.level, worst));
    }
    let c0 = per_level.iter().fold(0.0f64, |a, b| a.max(b.1));
    Ok(ConstantFit { c0, per_level })
}

/// `Phi_0 * chi_k` at `x`, or the block sum for structured fields.
pub fn mollified_phi(raw: &CoefficientField, spec: &MollifierSpec, x: &[f64], e: &mut Evaluation) -> Result<f64> {
    let mut err = None;
    let mut guard = |r: Result<f64>| match r {
        Ok(v) => v,
        Err(x) => {
            err = Some(x);
            0.0
        }
    };
    let v = match raw.block() {
        None => convolve(spec, x, |y| guard(raw.phi0(y, e)))?,
        Some(n1) => {
            let x2 = x[n1..].to_vec();
            let first = convolve(spec, &x[..n1], |y1| {
                let y: Vec<f64> = y1.iter().chain(&x2).copied().collect();
                guard(raw.phi_blocks(&y, e).map(|b| b.0))
            })?;
            let second = convolve(spec, x, |y| guard(raw.phi_blocks(y, e).map(|b| b.1)))?;
            first + second
        }
    };
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformBound {
    pub p: f64,
    pub p0: f64,
    pub c0: f64,
    /// `C_{2,p} = p^3 C_0`.
    pub c2p: f64,
    pub t0: f64,
    /// Integrals entering the bound (one, or two for structured fields).
    pub integrals: Vec<Estimate>,
    pub value: f64,
    pub divergent: bool,
}

/// `T_0 = min(1, p0 / C_{2,p})`, halved in the structured case, with `C_{2,p} = p^3 c0`.
pub fn horizon_t0(c0: f64, p: f64, p0: f64, structured: bool) -> f64 {
    let c2p = p.powi(3) * c0;
    let share = if structured { 0.5 * p0 } else { p0 };
    if c2p > 0.0 {
        (share / c2p).min(1.0)
    } else {
        1.0
    }
}

/// The k-free bound built from the unmollified field.
///
/// - unstructured: `mu(R^n)^{1/(p+1)} (3^alpha int e^{c Phi_0} dmu)^{1/(p(p+1))}`
///   with `c = C_{2,p} T_0` and `T_0 = min(1, p0 / C_{2,p})`;
/// - structured: the same with the integral replaced by
///   `[mu_2(R^{n_2}) 3^{alpha_1} int e^{2c Phi_1} dmu_1]^{1/2} [3^alpha int e^{2c Phi_2} dmu]^{1/2}`
///   and `T_0 = min(1, p0 / (2 C_{2,p}))`.
#[allow(clippy::too_many_arguments)]
pub fn uniform_density_bound<R: Rng + ?Sized>(
    raw: &CoefficientField,
    m: &ReferenceMeasure,
    alpha1: Option<f64>,
    p: f64,
    p0: f64,
    c0: f64,
    count: usize,
    rng: &mut R,
) -> Result<UniformBound> {
    let mass = m.total_mass()?;
    let c2p = p.powi(3) * c0;
    let mut e = raw.evaluation();
    let exponent = 1.0 / (p * (p + 1.0));
    let (t0, integrals, product, divergent) = match raw.block() {
        None => {
            let t0 = horizon_t0(c0, p, p0, false);
            let c = c2p * t0;
            let check = crate::coefficients::integral_with_doubling(
                m,
                |x| raw.phi0(x, &mut e).map(|v| (c * v).exp()).unwrap_or(f64::NAN),
                count / 8,
                3,
                rng,
            )?;
            let product = 3f64.powf(m.alpha()) * check.estimate.value;
            (t0, vec![check.estimate], product, check.divergent)
        }
        Some(n1) => {
            let a1 = alpha1.ok_or_else(|| Error::InvalidParameter("structured bound needs alpha_1".into()))?;
            let n2 = m.dim() - n1;
            if !(a1 > 0.5 * n1 as f64 && m.alpha() - a1 > 0.5 * n2 as f64) {
                return Err(Error::InvalidParameter("need alpha_1 > n_1/2 and alpha > alpha_1 + n_2/2".into()));
            }
            let t0 = horizon_t0(c0, p, p0, true);
            let c = c2p * t0;
            let m1 = ReferenceMeasure::finite(n1, a1)?;
            let m2 = ReferenceMeasure::finite(n2, m.alpha() - a1)?;
            // Phi_1 depends on x1 only; x2 is irrelevant and set to zero.
            let zeros = vec![0.0; n2];
            let mut e1 = raw.evaluation();
            let first = crate::coefficients::integral_with_doubling(
                &m1,
                |x1| {
                    let y: Vec<f64> = x1.iter().chain(&zeros).copied().collect();
                    raw.phi_blocks(&y, &mut e1).map(|b| (2.0 * c * b.0).exp()).unwrap_or(f64::NAN)
                },
                count / 8,
                3,
                rng,
            )?;
            let second = crate::coefficients::integral_with_doubling(
                m,
                |x| raw.phi_blocks(x, &mut e).map(|b| (2.0 * c * b.1).exp()).unwrap_or(f64::NAN),
                count / 8,
                3,
                rng,
            )?;
            let a = m2.total_mass()? * 3f64.powf(a1) * first.estimate.value;
            let b = 3f64.powf(m.alpha()) * second.estimate.value;
            (t0, vec![first.estimate, second.estimate], (a * b).sqrt(), first.divergent || second.divergent)
        }
    };
    Ok(UniformBound {
        p,
        p0,
        c0,
        c2p,
        t0,
        integrals,
        value: mass.powf(1.0 / (p + 1.0)) * product.powf(exponent),
        divergent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominationFit {
    /// Per level `(k, C)` with `|Lambda_1^{sigma_k}|^2 <= C ((|div sigma|^2 + |sigma_bar|^2) * chi_k)`.
    pub per_level: Vec<(u32, f64)>,
    pub finite: bool,
    /// Largest over smallest fitted constant across levels.
    pub spread: f64,
}

/// Fitted domination constants for `|Lambda_1|^2` of mollified fields.
pub fn lambda1_domination(
    raw: &CoefficientField,
    levels: &[(MollifierSpec, CoefficientField)],
    m: &ReferenceMeasure,
    points: &[Vec<f64>],
) -> Result<DominationFit> {
    let mut per_level = Vec::new();
    let mut e = raw.evaluation();
    for (spec, fk) in levels {
        let mut ek = fk.evaluation();
        let mut l1 = vec![0.0; fk.noise_dim()];
        let mut worst: f64 = 0.0;
        for x in points {
            fk.eval_with_jacobian(x, &mut ek)?;
            lambda1_into(&ek, m, x, &mut l1)?;
            let lhs = norm_sq(&l1);
            let rhs = convolve(spec, x, |y| {
                if raw.eval_with_jacobian(y, &mut e).is_err() {
                    return f64::NAN;
                }
                div_sigma_sq(&e, raw.block()) + crate::coefficients::scaled_norms(y, &e).0.powi(2)
            })?;
            if lhs > 0.0 {
                worst = worst.max(lhs / rhs);
            }
        }
        per_level.push((spec.level, worst));
    }
    let finite = per_level.iter().all(|c| c.1.is_finite());
    let lo = per_level.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let hi = per_level.iter().map(|c| c.1).fold(0.0, f64::max);
    Ok(DominationFit { per_level, finite, spread: if lo > 0.0 { hi / lo } else { f64::INFINITY } })
}

fn div_sigma_sq(e: &Evaluation, _block: Option<usize>) -> f64 {
    let n = e.drift.len();
    let m = e.sigma.len() / n;
    (0..m)
        .map(|l| {
            let d: f64 = (0..n).map(|i| e.dsigma_at(i, i, l)).sum();
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KdeReport {
    pub bandwidth: f64,
    /// `(probe, estimated density of (X_t)_# mu relative to mu)`.
    pub probes: Vec<(Vec<f64>, f64)>,
    /// Largest relative gap between quantiles of the KDE ratio at the sample
    /// points and of `1 / rho~_t`, over the deciles 0.1 to 0.9.
    pub quantile_distance: f64,
}

/// Gaussian kernel estimate of the push-forward density relative to `mu`,
/// assuming the initial points were drawn from the normalized `mu`.
pub fn kde_crosscheck(
    e: &FlowEnsemble,
    d: Option<&DensityTrack>,
    m: &ReferenceMeasure,
    record: usize,
    bandwidth: f64,
    probes: &[Vec<f64>],
) -> Result<KdeReport> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let n = e.dim;
    let mass = m.total_mass()?;
    let pts: Vec<&[f64]> = (0..e.len())
        .filter(|&j| !e.trajectories[j].exploded)
        .map(|j| e.trajectories[j].state(record, n))
        .collect();
    let norm = (2.0 * std::f64::consts::PI * bandwidth * bandwidth).powf(0.5 * n as f64) * pts.len() as f64;
    let ratio = |y: &[f64]| {
        let s: f64 = pts
            .iter()
            .map(|p| {
                let d2: f64 = p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-0.5 * d2 / (bandwidth * bandwidth)).exp()
            })
            .sum();
        s / norm * mass / m.weight_unchecked(y)
    };
    let probes_out = probes.iter().map(|y| (y.clone(), ratio(y))).collect();
    let mut quantile_distance = 0.0;
    if let Some(d) = d {
        let mut kde: Vec<f64> = pts.iter().take(2000).map(|p| ratio(p)).collect();
        let mut path: Vec<f64> = (0..d.len())
            .filter(|&j| d.usable(j))
            .take(2000)
            .map(|j| 1.0 / d.rho_tilde(j, record))
            .collect();
        kde.sort_by(f64::total_cmp);
        path.sort_by(f64::total_cmp);
        for q in 1..10 {
            let a = kde[(q * kde.len()) / 10];
            let b = path[(q * path.len()) / 10];
            quantile_distance = f64::max(quantile_distance, (a - b).abs() / b.abs().max(1e-300));
        }
    }
    Ok(KdeReport { bandwidth, probes: probes_out, quantile_distance })
}
