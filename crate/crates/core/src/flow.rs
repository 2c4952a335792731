//! Euler-Maruyama ensembles of the flow `X_t(omega, x)` under a shared
//! Brownian driver.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, Evaluation};
use crate::error::{Error, Result};
use crate::linalg::norm_sq;
use crate::measure::ReferenceMeasure;
use crate::seed;
use crate::stats::{Accumulator, Estimate};

/// States with `|x|` above this, or non-finite, mark a trajectory exploded.
pub const EXPLOSION_THRESHOLD: f64 = 1e8;

fn steps_for(span: f64, dt: f64) -> Result<usize> {
    let steps = (span / dt).round();
    if steps < 0.0 || (steps * dt - span).abs() > 1e-9 * dt.max(span) {
        return Err(Error::GridMisalignment(format!("{span} is not a multiple of the step {dt}")));
    }
    Ok(steps as usize)
}

/// Brownian increments regenerated on demand from per-omega seed streams.
///
/// Each step of size `dt = coarsen * fine_dt` sums `coarsen` fine Gaussian
/// increments, so drivers that differ only in `coarsen` share one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrownianDriver {
    noise_dim: usize,
    fine_dt: f64,
    coarsen: usize,
    seed: u64,
    omegas: usize,
    /// Fine steps consumed before time zero of this driver.
    offset: usize,
}

impl BrownianDriver {
    pub fn new(noise_dim: usize, dt: f64, seed: u64, omegas: usize) -> Result<Self> {
        if noise_dim == 0 {
            return Err(Error::InvalidParameter("noise dimension must be positive".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { noise_dim, fine_dt: dt, coarsen: 1, seed, omegas, offset: 0 })
    }

    /// Same path, step multiplied by `factor`.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidParameter("coarsening factor must be positive".into()));
        }
        Ok(Self { coarsen: self.coarsen * factor, ..self.clone() })
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn dt(&self) -> f64 {
        self.fine_dt * self.coarsen as f64
    }

    pub fn omegas(&self) -> usize {
        self.omegas
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The driver of `(theta_s B)_t = B_{t+s} - B_s`.
    pub fn time_shift(&self, s: f64) -> Result<Self> {
        let steps = steps_for(s, self.dt())?;
        Ok(Self { offset: self.offset + steps * self.coarsen, ..self.clone() })
    }

    pub fn stream(&self, omega: usize) -> IncrementStream {
        let mut rng = seed::stream(self.seed, "brownian", omega as u64);
        for _ in 0..self.offset * self.noise_dim {
            let _: f64 = rng.sample(StandardNormal);
        }
        IncrementStream { rng, noise_dim: self.noise_dim, coarsen: self.coarsen, scale: self.fine_dt.sqrt() }
    }

    /// `B_{t_i}` for `i = 0..=steps`, flattened `[i][k]`.
    pub fn path(&self, omega: usize, steps: usize) -> Vec<f64> {
        let m = self.noise_dim;
        let mut out = vec![0.0; (steps + 1) * m];
        let mut s = self.stream(omega);
        let mut db = vec![0.0; m];
        for i in 0..steps {
            s.next_into(&mut db);
            for k in 0..m {
                out[(i + 1) * m + k] = out[i * m + k] + db[k];
            }
        }
        out
    }
}

pub struct IncrementStream {
    rng: ChaCha8Rng,
    noise_dim: usize,
    coarsen: usize,
    scale: f64,
}

impl IncrementStream {
    pub fn next_into(&mut self, out: &mut [f64]) {
        out.fill(0.0);
        for _ in 0..self.coarsen {
            for o in out.iter_mut().take(self.noise_dim) {
                let z: f64 = self.rng.sample(StandardNormal);
                *o += z * self.scale;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
    /// Every `stride`-th state is stored; the stride divides `steps`.
    pub stride: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, dt: f64, stride: usize) -> Result<Self> {
        let steps = steps_for(horizon, dt)?;
        if stride == 0 || steps % stride != 0 {
            return Err(Error::GridMisalignment(format!("record stride {stride} must divide {steps} steps")));
        }
        Ok(Self { dt, steps, stride })
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn records(&self) -> usize {
        self.steps / self.stride + 1
    }

    pub fn record_time(&self, r: usize) -> f64 {
        (r * self.stride) as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Trajectory `j` uses `omega_j` and `x_j`: i.i.d. samples of `P x mu`.
    Diagonal,
    /// Every `omega` against every `x`.
    Product,
}

/// Starting assignments `(omega, x_index, x0)` for each trajectory.
pub fn pairs(x0s: &[Vec<f64>], omegas: usize, pairing: Pairing) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    match pairing {
        Pairing::Diagonal => {
            if omegas != x0s.len() {
                return Err(Error::Mismatch(format!("diagonal pairing needs {} omegas, driver has {omegas}", x0s.len())));
            }
            Ok(x0s.iter().enumerate().map(|(j, x)| (j, j, x.clone())).collect())
        }
        Pairing::Product => Ok((0..omegas)
            .flat_map(|w| x0s.iter().enumerate().map(move |(i, x)| (w, i, x.clone())))
            .collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub omega: usize,
    pub x_index: usize,
    /// Recorded states, `[record][coordinate]`.
    pub states: Vec<f64>,
    /// `max_t |X_t|` over every grid time.
    pub sup_norm: f64,
    pub exploded: bool,
}

impl Trajectory {
    pub fn state(&self, record: usize, dim: usize) -> &[f64] {
        &self.states[record * dim..(record + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowEnsemble {
    pub dim: usize,
    pub grid: TimeGrid,
    pub trajectories: Vec<Trajectory>,
}

impl FlowEnsemble {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn exploded(&self) -> usize {
        self.trajectories.iter().filter(|t| t.exploded).count()
    }

    pub fn sup_norms(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.sup_norm).collect()
    }

    pub fn terminal(&self, j: usize) -> &[f64] {
        self.trajectories[j].state(self.grid.records() - 1, self.dim)
    }

    /// CSV rows `omega_index,x_index,t,x0,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "omega_index,x_index,t,{}", header.join(","))?;
        for t in &self.trajectories {
            for r in 0..self.grid.records() {
                let s: Vec<String> = t.state(r, self.dim).iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{},{},{},{}", t.omega, t.x_index, self.grid.record_time(r), s.join(","))?;
            }
        }
        Ok(())
    }
}

/// Hook into the Euler loop, called with left-point quantities.
pub trait Observer: Send {
    /// Before the step from `t_index` to `t_index + 1`. `jacobian_ok` is false
    /// when derivatives were requested but could not be computed.
    fn step(&mut self, t_index: usize, x: &[f64], db: &[f64], dt: f64, e: &Evaluation, jacobian_ok: bool);
    /// At each recorded time, including `t = 0`.
    fn record(&mut self);
}

struct NoObserver;

impl Observer for NoObserver {
    fn step(&mut self, _: usize, _: &[f64], _: &[f64], _: f64, _: &Evaluation, _: bool) {}
    fn record(&mut self) {}
}

#[inline]
fn euler_step(x: &mut [f64], e: &Evaluation, db: &[f64], dt: f64) {
    let m = db.len();
    for (i, xi) in x.iter_mut().enumerate() {
        let mut noise = 0.0;
        for (k, d) in db.iter().enumerate() {
            noise += e.sigma[i * m + k] * d;
        }
        *xi += noise + e.drift[i] * dt;
    }
}

fn run_one<O: Observer>(
    field: &CoefficientField,
    driver: &BrownianDriver,
    grid: &TimeGrid,
    start: &(usize, usize, Vec<f64>),
    with_jacobian: bool,
    observer: &mut O,
) -> Trajectory {
    let n = field.dim();
    let (omega, x_index, x0) = start;
    let mut x = x0.clone();
    let mut stream = driver.stream(*omega);
    let mut db = vec![0.0; driver.noise_dim()];
    let mut e = field.evaluation();
    let mut states = Vec::with_capacity(grid.records() * n);
    states.extend_from_slice(&x);
    observer.record();
    let mut sup = norm_sq(&x).sqrt();
    let mut exploded = !x.iter().all(|v| v.is_finite());
    for i in 0..grid.steps {
        if exploded {
            break;
        }
        stream.next_into(&mut db);
        let ok = if with_jacobian {
            field.eval_with_jacobian(&x, &mut e).is_ok()
        } else {
            field.eval_into(&x, &mut e);
            true
        };
        observer.step(i, &x, &db, grid.dt, &e, ok);
        euler_step(&mut x, &e, &db, grid.dt);
        let r = norm_sq(&x).sqrt();
        if !(r <= EXPLOSION_THRESHOLD) {
            exploded = true;
        }
        sup = sup.max(r);
        if (i + 1) % grid.stride == 0 {
            states.extend_from_slice(&x);
            observer.record();
        }
    }
    if exploded {
        states.resize(grid.records() * n, f64::NAN);
    }
    Trajectory { omega: *omega, x_index: *x_index, states, sup_norm: if exploded { f64::INFINITY } else { sup }, exploded }
}

fn check_field(field: &CoefficientField, driver: &BrownianDriver) -> Result<()> {
    if field.noise_dim() != driver.noise_dim() {
        return Err(Error::Dimension(format!(
            "field noise dimension {} vs driver {}",
            field.noise_dim(),
            driver.noise_dim()
        )));
    }
    Ok(())
}

/// Integrates every start with an observer built per trajectory.
pub fn integrate_observed<O, F>(
    field: &CoefficientField,
    driver: &BrownianDriver,
    starts: &[(usize, usize, Vec<f64>)],
    grid: TimeGrid,
    with_jacobian: bool,
    make: F,
) -> Result<(FlowEnsemble, Vec<O>)>
where
    O: Observer,
    F: Fn(usize) -> O + Sync,
{
    check_field(field, driver)?;
    if let Some(s) = starts.iter().find(|s| s.2.len() != field.dim()) {
        return Err(Error::Dimension(format!("initial point {:?} has wrong length", s.2)));
    }
    if let Some(s) = starts.iter().find(|s| s.0 >= driver.omegas()) {
        return Err(Error::Mismatch(format!("omega index {} outside driver range", s.0)));
    }
    let results: Vec<(Trajectory, O)> = starts
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let mut obs = make(j);
            let t = run_one(field, driver, &grid, s, with_jacobian, &mut obs);
            (t, obs)
        })
        .collect();
    let (trajectories, observers) = results.into_iter().unzip();
    Ok((FlowEnsemble { dim: field.dim(), grid, trajectories }, observers))
}

/// Euler-Maruyama ensemble `X_{t+dt} = X_t + sigma(X_t) dB + b(X_t) dt`.
pub fn integrate(
    field: &CoefficientField,
    driver: &BrownianDriver,
    x0s: &[Vec<f64>],
    pairing: Pairing,
    horizon: f64,
    stride: usize,
) -> Result<FlowEnsemble> {
    let grid = TimeGrid::new(horizon, driver.dt(), stride)?;
    let starts = pairs(x0s, driver.omegas(), pairing)?;
    integrate_observed(field, driver, &starts, grid, false, |_| NoObserver).map(|r| r.0)
}

/// Integrates from explicit `(omega, x_index, x0)` starts.
pub fn integrate_starts(
    field: &CoefficientField,
    driver: &BrownianDriver,
    starts: &[(usize, usize, Vec<f64>)],
    horizon: f64,
    stride: usize,
) -> Result<FlowEnsemble> {
    let grid = TimeGrid::new(horizon, driver.dt(), stride)?;
    integrate_observed(field, driver, starts, grid, false, |_| NoObserver).map(|r| r.0)
}

/// Starts for restarting from the terminal states of `e`, keeping each omega.
pub fn restart_points(e: &FlowEnsemble) -> Vec<(usize, usize, Vec<f64>)> {
    (0..e.len())
        .map(|j| (e.trajectories[j].omega, e.trajectories[j].x_index, e.terminal(j).to_vec()))
        .collect()
}

/// `X_t(theta_s B, X_s(omega, x))`: restarts from the states of `at_s`,
/// integrated up to time `s`, with the driver shifted by `s`.
pub fn compose_time_shift(
    field: &CoefficientField,
    at_s: &FlowEnsemble,
    driver: &BrownianDriver,
    s: f64,
    horizon: f64,
    stride: usize,
) -> Result<FlowEnsemble> {
    let steps = steps_for(s, driver.dt())?;
    if steps != at_s.grid.steps || at_s.grid.dt != driver.dt() {
        return Err(Error::GridMisalignment(format!(
            "ensemble ends after {} steps of {}, shift is {steps} steps of {}",
            at_s.grid.steps,
            at_s.grid.dt,
            driver.dt()
        )));
    }
    let shifted = driver.time_shift(s)?;
    let mut out = integrate_starts(field, &shifted, &restart_points(at_s), horizon, stride)?;
    for (t, prior) in out.trajectories.iter_mut().zip(&at_s.trajectories) {
        if prior.exploded {
            t.exploded = true;
            t.sup_norm = f64::INFINITY;
        } else {
            t.sup_norm = t.sup_norm.max(prior.sup_norm);
        }
    }
    Ok(out)
}

fn check_matched(e1: &FlowEnsemble, e2: &FlowEnsemble) -> Result<()> {
    if e1.dim != e2.dim || e1.grid != e2.grid || e1.len() != e2.len() {
        return Err(Error::Mismatch("ensembles differ in dimension, grid or size".into()));
    }
    for (a, b) in e1.trajectories.iter().zip(&e2.trajectories) {
        if a.omega != b.omega || a.x_index != b.x_index {
            return Err(Error::Mismatch("ensembles are indexed differently".into()));
        }
    }
    Ok(())
}

/// `max_t |X^1_t - X^2_t|` over recorded times for trajectory `j`.
pub fn sup_distance(e1: &FlowEnsemble, e2: &FlowEnsemble, j: usize) -> f64 {
    let (a, b) = (&e1.trajectories[j], &e2.trajectories[j]);
    let mut best: f64 = 0.0;
    for (u, v) in a.states.chunks(e1.dim).zip(b.states.chunks(e2.dim)) {
        let d: f64 = u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum();
        best = best.max(d.sqrt());
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricEstimate {
    pub estimate: Estimate,
    /// Pairs excluded because either trajectory exploded.
    pub excluded: usize,
}

/// Monte Carlo estimate of `E int 1 ^ ||X^1 - X^2||_{inf,T} dmu`.
pub fn convergence_metric(e1: &FlowEnsemble, e2: &FlowEnsemble, m: &ReferenceMeasure) -> Result<MetricEstimate> {
    check_matched(e1, e2)?;
    let mass = m.total_mass()?;
    let mut acc = Accumulator::new();
    let mut excluded = 0;
    for j in 0..e1.len() {
        if e1.trajectories[j].exploded || e2.trajectories[j].exploded {
            excluded += 1;
            continue;
        }
        acc.push(sup_distance(e1, e2, j).min(1.0));
    }
    Ok(MetricEstimate { estimate: acc.estimate().scaled(mass), excluded })
}

/// Empirical `(P x mu)(G_R^c)`: mass times the fraction of trajectories whose
/// sup norm exceeds `R`. Exploded trajectories count as exits.
pub fn level_set_tail(e: &FlowEnsemble, m: &ReferenceMeasure, radius: f64) -> Result<Estimate> {
    let mass = m.total_mass()?;
    let mut acc = Accumulator::new();
    for t in &e.trajectories {
        acc.push(if t.sup_norm > radius { 1.0 } else { 0.0 });
    }
    Ok(acc.estimate().scaled(mass))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSetInputs {
    pub horizon: f64,
    /// `sup_t ||rho_t||_{L^p(P x mu)}` with `p` conjugate to `q`.
    pub lambda_pt: f64,
    pub sigma_l2q: f64,
    pub drift_lq: f64,
}

/// `C = C_1 + 2 (mu(R^n) T Lambda)^{1/2} ||sigma||_{2q} + T Lambda ||b||_q`.
pub fn level_set_constant(m: &ReferenceMeasure, inp: &LevelSetInputs) -> Result<f64> {
    let c1 = m.abs_moment()?;
    let mass = m.total_mass()?;
    Ok(c1
        + 2.0 * (mass * inp.horizon * inp.lambda_pt).sqrt() * inp.sigma_l2q
        + inp.horizon * inp.lambda_pt * inp.drift_lq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelSetReport {
    pub radius: f64,
    pub empirical: Estimate,
    pub constant: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn level_set_check(
    e: &FlowEnsemble,
    m: &ReferenceMeasure,
    radius: f64,
    inputs: Option<&LevelSetInputs>,
) -> Result<LevelSetReport> {
    let inputs = inputs.ok_or_else(|| Error::MissingEstimate("level-set bound needs sup_t ||rho_t||_p".into()))?;
    let empirical = level_set_tail(e, m, radius)?;
    let constant = level_set_constant(m, inputs)?;
    let bound = constant / radius;
    Ok(LevelSetReport { radius, empirical, constant, bound, pass: empirical.value <= bound })
}

/// `(int |sigma|^{2q} dmu)^{1/(2q)}` and `(int |b|^q dmu)^{1/q}` by Monte Carlo.
pub fn coefficient_norms<R: Rng + ?Sized>(
    field: &CoefficientField,
    m: &ReferenceMeasure,
    q: f64,
    count: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let mut e = field.evaluation();
    let mut x = vec![0.0; m.dim()];
    let (mut s_acc, mut b_acc) = (Accumulator::new(), Accumulator::new());
    for _ in 0..count {
        m.sample_one(rng, &mut x);
        field.eval_into(&x, &mut e);
        s_acc.push(norm_sq(&e.sigma).powf(q));
        b_acc.push(norm_sq(&e.drift).powf(0.5 * q));
    }
    let mass = m.total_mass()?;
    Ok(((mass * s_acc.mean()).powf(0.5 / q), (mass * b_acc.mean()).powf(1.0 / q)))
}

/// `count` initial points from the normalized measure on a named stream.
pub fn initial_points(m: &ReferenceMeasure, master: u64, component: &str, count: usize) -> Result<Vec<Vec<f64>>> {
    m.sample(&mut seed::stream(master, component, 0), count)
}
