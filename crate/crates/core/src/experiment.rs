//! Runs one configured experiment and writes its CSV tables and summary.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::acceptance::maximal_inequality_suite;
use crate::coefficients::mollifier::mollify;
use crate::coefficients::{condition_integrals, CoefficientField, Kernel, MollifierSpec};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::density::{density_bound_rhs, integrate_with_density, lp_density_norm};
use crate::derivative::{lift, verify_hypotheses, weak_derivative_convergence, LiftedMeasures};
use crate::error::Result;
use crate::flow::{initial_points, integrate, level_set_tail, BrownianDriver, FlowEnsemble, Pairing};
use crate::measure::ReferenceMeasure;
use crate::seed;
use crate::stability::{cauchy_experiment, tail_radius, uniqueness_experiment, ExperimentSetup};

/// One asserted inequality or property.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: Value,
}

impl Assertion {
    fn new(name: impl Into<String>, pass: bool, detail: Value) -> Self {
        Self { name: name.into(), pass, detail }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub assertions: Vec<Assertion>,
    pub results: Value,
    pub all_pass: bool,
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    measure: ReferenceMeasure,
    out: &'a Path,
}

impl Context<'_> {
    fn csv(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn driver(&self, f: &CoefficientField) -> Result<BrownianDriver> {
        let c = self.config;
        BrownianDriver::new(f.noise_dim(), c.numerics.dt, seed::derive_seed(c.seed, "driver", 0), c.budgets.omegas)
    }

    fn starts(&self, m: &ReferenceMeasure) -> Result<Vec<Vec<f64>>> {
        initial_points(m, self.config.seed, "x0", self.config.budgets.x_count)
    }

    fn pairing(&self) -> Pairing {
        if self.config.budgets.omegas == self.config.budgets.x_count {
            Pairing::Diagonal
        } else {
            Pairing::Product
        }
    }

    /// The configured field, mollified at the finest level when the family is rough.
    fn simulated_field(&self) -> Result<CoefficientField> {
        let raw = self.config.family.build()?;
        match self.config.numerics.levels.last() {
            Some(&k) if self.config.family.needs_mollification() => mollify(&raw, &MollifierSpec::bump(k)?),
            _ => Ok(raw),
        }
    }
}

/// Validates `config`, runs it, writes CSV files and `summary.json` under
/// `out`, and returns the report. Identical inputs give identical bytes.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let cx = Context { config, measure: ReferenceMeasure::new(config.measure.n, config.measure.alpha)?, out };
    let (assertions, results) = match config.kind {
        ExperimentKind::Simulate => simulate(&cx)?,
        ExperimentKind::Density => density(&cx)?,
        ExperimentKind::Stability => stability(&cx)?,
        ExperimentKind::Derivative => derivative(&cx)?,
        ExperimentKind::Analysis => analysis(&cx)?,
        ExperimentKind::VerifyHypotheses => hypotheses(&cx)?,
    };
    let all_pass = assertions.iter().all(|a| a.pass);
    let report = RunReport { version: env!("CARGO_PKG_VERSION").into(), config: config.clone(), assertions, results, all_pass };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out.join("summary.json"), text)?;
    Ok(report)
}

type Outcome = (Vec<Assertion>, Value);

fn radii(cx: &Context, ensembles: &[FlowEnsemble]) -> Result<Vec<f64>> {
    if cx.config.numerics.radii.is_empty() {
        Ok(vec![tail_radius(ensembles, 0.05)?])
    } else {
        Ok(cx.config.numerics.radii.clone())
    }
}

fn simulate(cx: &Context) -> Result<Outcome> {
    let nm = &cx.config.numerics;
    let f = cx.simulated_field()?;
    let x0 = cx.starts(&cx.measure)?;
    let e = integrate(&f, &cx.driver(&f)?, &x0, cx.pairing(), nm.horizon, nm.stride)?;
    e.write_csv(cx.csv("trajectories.csv")?)?;
    let mut w = cx.csv("tails.csv")?;
    use std::io::Write;
    writeln!(w, "radius,tail,se")?;
    let mut tails = Vec::new();
    for r in radii(cx, std::slice::from_ref(&e))? {
        let t = level_set_tail(&e, &cx.measure, r)?;
        writeln!(w, "{r:e},{:e},{:e}", t.value, t.se)?;
        tails.push(json!({"radius": r, "tail": t.value, "se": t.se}));
    }
    let displacement = e
        .trajectories
        .iter()
        .map(|tr| {
            let start = tr.state(0, e.dim);
            (0..e.grid.records())
                .map(|r| tr.state(r, e.dim).iter().zip(start).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let exploded = e.exploded();
    Ok((
        vec![Assertion::new("no trajectory exploded", exploded == 0, json!({"exploded": exploded}))],
        json!({"trajectories": e.len(), "records": e.grid.records(), "max_displacement": displacement, "tails": tails}),
    ))
}

fn density(cx: &Context) -> Result<Outcome> {
    let c = cx.config;
    let nm = &c.numerics;
    let f = cx.simulated_field()?;
    let x0 = cx.starts(&cx.measure)?;
    let (e, tr) = integrate_with_density(&f, &cx.measure, &cx.driver(&f)?, &x0, cx.pairing(), nm.horizon, nm.stride)?;
    tr.write_csv(&e, cx.csv("density.csv")?)?;
    let times: Vec<f64> = (0..tr.grid.records()).map(|r| tr.grid.record_time(r)).collect();
    let rhs = density_bound_rhs(&f, &cx.measure, nm.p, &times, c.budgets.quadrature, &mut seed::stream(c.seed, "rhs", 0))?;
    let mut w = cx.csv("lp_norms.csv")?;
    use std::io::Write;
    writeln!(w, "t,norm,se,rhs")?;
    let mut assertions = vec![Assertion::new("bound is finite", !rhs.divergent, json!({"rhs": rhs.value}))];
    let mut rows = Vec::new();
    for r in 0..tr.grid.records() {
        let n = lp_density_norm(&tr, &cx.measure, nm.p, r)?;
        writeln!(w, "{:e},{:e},{:e},{:e}", n.time, n.norm.value, n.norm.se, rhs.value)?;
        assertions.push(Assertion::new(
            format!("norm <= rhs + 2 se at t = {}", n.time),
            n.norm.value <= rhs.value + 2.0 * n.norm.se,
            json!({"norm": n.norm.value, "se": n.norm.se, "rhs": rhs.value}),
        ));
        rows.push(n);
    }
    Ok((assertions, json!({"bound": rhs, "norms": rows, "excluded": tr.excluded()})))
}

fn stability(cx: &Context) -> Result<Outcome> {
    let c = cx.config;
    let nm = &c.numerics;
    let raw = c.family.build()?;
    let setup = ExperimentSetup {
        driver: cx.driver(&raw)?,
        x0s: cx.starts(&cx.measure)?,
        horizon: nm.horizon,
        stride: nm.stride,
        radius: nm.radii.first().copied(),
        q: nm.q,
        points: c.budgets.quadrature,
    };
    let table = cauchy_experiment(&raw, &cx.measure, &nm.levels, Kernel::Bump, &setup)?;
    table.write_csv(cx.csv("cauchy.csv")?)?;
    let finest = *nm.levels.last().expect("validated");
    let uniq = uniqueness_experiment(&raw, &cx.measure, finest, (Kernel::Bump, Kernel::FlatBump), &setup)?;
    let metrics: Vec<f64> = table.rows.iter().map(|r| r.metric.estimate.value).collect();
    Ok((
        vec![
            Assertion::new("Cauchy metric strictly decreasing", table.metric_decreasing, json!({"metrics": metrics})),
            Assertion::new(
                "uniqueness metric below final Cauchy gap",
                uniq.below_gap,
                json!({"metric": uniq.metric.estimate.value, "gap": uniq.cauchy_gap.estimate.value}),
            ),
        ],
        json!({"cauchy": table, "uniqueness": uniq}),
    ))
}

fn derivative(cx: &Context) -> Result<Outcome> {
    let c = cx.config;
    let nm = &c.numerics;
    let sys = lift(&c.family.build()?)?;
    let lm = LiftedMeasures::default_for(sys.dim(), nm.q)?;
    let starts = initial_points(&lm.joint, c.seed, "x0", c.budgets.omegas)?;
    let driver = cx.driver(&sys.base)?;
    let table = weak_derivative_convergence(&sys, &nm.epsilons, &driver, &starts, &lm.joint, nm.horizon, nm.stride)?;
    table.write_csv(cx.csv("derivative.csv")?)?;
    Ok((
        vec![Assertion::new(
            "clipped metric strictly decreasing in epsilon",
            table.strictly_decreasing,
            json!({"final_over_first": table.reduction}),
        )],
        json!({"lifted_measures": lm, "convergence": table}),
    ))
}

fn analysis(cx: &Context) -> Result<Outcome> {
    let c = cx.config;
    let nm = &c.numerics;
    let mut rng = seed::stream(c.seed, "functions", 0);
    let (pass, report) =
        maximal_inequality_suite(&[c.measure.n], &[nm.p], &[nm.delta], &nm.thetas, c.budgets.x_count, &mut rng)?;
    Ok((vec![Assertion::new("maximal inequalities hold for every test function", pass, Value::Null)], report))
}

fn hypotheses(cx: &Context) -> Result<Outcome> {
    let c = cx.config;
    let nm = &c.numerics;
    let f = c.family.build()?;
    let base = (c.budgets.quadrature / 8).max(16);
    let cond = condition_integrals(&f, &cx.measure, nm.p0, base, 3, true, &mut seed::stream(c.seed, "conditions", 0))?;
    let mut assertions = vec![Assertion::new("integrability conditions finite", cond.finite(), Value::Null)];
    let mut results = json!({"conditions": cond});
    if let Ok(sys) = lift(&f) {
        let lm = LiftedMeasures::default_for(sys.dim(), nm.q)?;
        let eps: Vec<f64> = nm.epsilons.iter().copied().filter(|e| *e <= 0.5).collect();
        let mut rng = seed::stream(c.seed, "hypotheses", 0);
        let h = verify_hypotheses(&sys, &lm, nm.p0, &eps, c.budgets.quadrature, c.budgets.x_count, &mut rng)?;
        assertions.push(Assertion::new("derivative hypotheses", h.pass, json!({"band_ratio": h.band_ratio})));
        results["derivative"] = serde_json::to_value(&h)?;
    }
    Ok((assertions, results))
}
