use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stochflow::acceptance::{verify_all, Budget};
use stochflow::config::{ExperimentConfig, ExperimentKind};
use stochflow::experiment::run;

#[derive(Parser)]
#[command(name = "stochflow", version, about = "Simulate and verify generalized stochastic flows of Ito SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate an ensemble and report level-set tails.
    Simulate(Common),
    /// Track pathwise densities and check the L^p bound.
    Density(Common),
    /// Cauchy and uniqueness experiments over mollification levels.
    Stability(Common),
    /// Convergence of difference quotients to the derivative flow.
    Derivative(Common),
    /// Maximal-function inequality suite.
    Analysis(Common),
    /// Integrability conditions and derivative-system hypotheses.
    VerifyHypotheses(Common),
    /// The full acceptance suite.
    VerifyAll(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    budget_scale: f64,
}

fn experiment(kind: ExperimentKind, c: &Common) -> Result<bool, String> {
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ExperimentConfig::default_for(kind),
    };
    if config.kind != kind {
        return Err(format!("config is for `{}`, not `{}`", config.kind.label(), kind.label()));
    }
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(o) = &c.out {
        config.out = o.display().to_string();
    }
    config.budgets = config.budgets.scaled(c.budget_scale);
    let report = run(&config, &PathBuf::from(&config.out)).map_err(|e| e.to_string())?;
    for a in report.assertions.iter().filter(|a| !a.pass) {
        println!("FAIL {}: {}", a.name, a.detail);
    }
    let passed = report.assertions.iter().filter(|a| a.pass).count();
    println!("{}: {passed}/{} assertions pass", kind.label(), report.assertions.len());
    println!("wrote {}/summary.json", config.out);
    Ok(report.all_pass)
}

fn acceptance(c: &Common) -> Result<bool, String> {
    if c.config.is_some() {
        return Err("verify-all takes no config".into());
    }
    let out = c.out.clone().unwrap_or_else(|| "out".into());
    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    let summary = verify_all(&Budget::new(c.seed.unwrap_or(20240601), c.budget_scale), |r| println!("{}", r.line()));
    let write = |name: &str, v: &serde_json::Value| -> Result<(), String> {
        let text = serde_json::to_string_pretty(v).map_err(|e| e.to_string())? + "\n";
        std::fs::write(out.join(name), text).map_err(|e| e.to_string())
    };
    write("summary.json", &serde_json::to_value(&summary).map_err(|e| e.to_string())?)?;
    write("timings.json", &summary.timings())?;
    Ok(summary.criteria.iter().all(|c| c.pass && c.within_limit()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(c) => experiment(ExperimentKind::Simulate, c),
        Command::Density(c) => experiment(ExperimentKind::Density, c),
        Command::Stability(c) => experiment(ExperimentKind::Stability, c),
        Command::Derivative(c) => experiment(ExperimentKind::Derivative, c),
        Command::Analysis(c) => experiment(ExperimentKind::Analysis, c),
        Command::VerifyHypotheses(c) => experiment(ExperimentKind::VerifyHypotheses, c),
        Command::VerifyAll(c) => acceptance(c),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
