use proptest::prelude::*;
use stochflow::coefficients::Family;
use stochflow::config::{Budgets, ExperimentConfig, ExperimentKind};
use stochflow::experiment::run;
use stochflow::flow::initial_points;
use stochflow::ReferenceMeasure;

const KINDS: [ExperimentKind; 6] = [
    ExperimentKind::Simulate,
    ExperimentKind::Density,
    ExperimentKind::Stability,
    ExperimentKind::Derivative,
    ExperimentKind::Analysis,
    ExperimentKind::VerifyHypotheses,
];

#[test]
fn defaults_validate_and_round_trip() {
    for kind in KINDS {
        let c = ExperimentConfig::default_for(kind);
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c, "{text}");
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), c);
    }
}

#[test]
fn minimal_config_fills_defaults() {
    let c = ExperimentConfig::from_toml(
        r#"
kind = "simulate"
[family]
name = "ou"
[measure]
n = 1
alpha = 3.0
"#,
    )
    .unwrap();
    assert_eq!(c.family, Family::Ou { dim: 1, theta: 1.0, s: 1.0 });
    assert_eq!(c.budgets, Budgets::default());
    assert_eq!(c.seed, 0);
}

fn rejection(text: &str) -> String {
    ExperimentConfig::from_toml(text).unwrap_err().to_string()
}

#[test]
fn missing_alpha_is_rejected() {
    let e = rejection("kind = \"simulate\"\n[family]\nname = \"ou\"\n[measure]\nn = 1\n");
    assert!(e.contains("alpha"), "{e}");
}

#[test]
fn small_alpha_names_the_constraint() {
    let e = rejection("kind = \"density\"\n[family]\nname = \"ou\"\n[measure]\nn = 1\nalpha = 2.5\n");
    assert!(e.contains("alpha must exceed q + n/2"), "{e}");
    // q = 1.5 lowers the threshold to 2
    let ok = "kind = \"density\"\n[family]\nname = \"ou\"\n[measure]\nn = 1\nalpha = 2.5\n[numerics]\nq = 1.5\n";
    ExperimentConfig::from_toml(ok).unwrap();
}

#[test]
fn structured_family_needs_alpha1() {
    let base = "kind = \"stability\"\n[family]\nname = \"partial_sobolev\"\n[measure]\nn = 2\nalpha = 5.0\n";
    assert!(rejection(base).contains("alpha1 is required"));
    assert!(rejection(&format!("{base}alpha1 = 2.4\n")).contains("alpha1 must exceed q + n1/2"));
    let tight = base.replace("alpha = 5.0", "alpha = 3.1\nalpha1 = 3.0");
    assert!(rejection(&tight).contains("alpha1 + n2/2"));
    ExperimentConfig::from_toml(&format!("{base}alpha1 = 3.0\n")).unwrap();
}

#[test]
fn other_rejections() {
    let head = "kind = \"derivative\"\n[family]\nname = \"ou\"\n[measure]\nn = 1\nalpha = 3.0\n";
    assert!(rejection("kind = \"simulate\"\n[family]\nname = \"ou\"\n[measure]\nn = 2\nalpha = 4.0\n").contains("dimension"));
    assert!(rejection(&format!("{head}[numerics]\nepsilons = [0.75, 0.25]\n")).contains("(0, 1/2]"));
    assert!(rejection(&format!("{head}[numerics]\nepsilons = [0.5]\n")).contains("two epsilons"));
    assert!(rejection(&format!("{head}[numerics]\nlevels = [4, 2]\n")).contains("increasing"));
    assert!(rejection(&format!("{head}[numerics]\ndt = 2.0\n")).contains("dt"));
    assert!(rejection(&format!("{head}bogus = 1\n")).contains("bogus"));
    assert!(rejection(&head.replace("\"ou\"", "\"nope\"")).contains("nope"));
}

#[test]
fn budgets_scale_with_floor() {
    let b = Budgets { omegas: 1000, x_count: 100, quadrature: 20 };
    assert_eq!(b.scaled(0.5), Budgets { omegas: 500, x_count: 50, quadrature: 16 });
}

fn small(kind: ExperimentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default_for(kind);
    c.budgets = Budgets { omegas: 200, x_count: 200, quadrature: 4000 };
    c.seed = 7;
    c
}

#[test]
fn analysis_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::default_for(ExperimentKind::Analysis);
    c.budgets.x_count = 50;
    let r = run(&c, dir.path()).unwrap();
    assert!(r.all_pass, "{:?}", r.assertions);
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn trivial_simulation_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(ExperimentKind::Simulate);
    c.family = Family::Zero { dim: 1, noise_dim: 1 };
    let r = run(&c, dir.path()).unwrap();
    assert!(r.all_pass);
    assert_eq!(r.results["max_displacement"], 0.0);
    // the trivial flow never moves, so its tail is the starting points' tail
    let m = ReferenceMeasure::new(1, c.measure.alpha).unwrap();
    let x0 = initial_points(&m, c.seed, "x0", 200).unwrap();
    for t in r.results["tails"].as_array().unwrap() {
        let radius = t["radius"].as_f64().unwrap();
        let outside = x0.iter().filter(|x| x[0].abs() > radius).count() as f64 / 200.0;
        let expect = outside * m.total_mass().unwrap();
        assert!((t["tail"].as_f64().unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn every_kind_runs_and_reports_reproducibly() {
    for kind in KINDS {
        let c = small(kind);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run(&c, a.path()).unwrap();
        run(&c, b.path()).unwrap();
        assert!(ra.all_pass, "{kind:?}: {:?}", ra.assertions);
        assert_eq!(ra.config, c);
        assert_eq!(ra.version, env!("CARGO_PKG_VERSION"));
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() >= 2 || kind == ExperimentKind::Analysis || kind == ExperimentKind::VerifyHypotheses);
        for n in names {
            let (x, y) = (std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
            assert!(x == y, "{kind:?}: {n:?} differs");
        }
        let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(serde_json::from_value::<ExperimentConfig>(summary["config"].clone()).unwrap(), c);
    }
}

#[test]
fn csv_outputs_have_headers_and_lf() {
    let dir = tempfile::tempdir().unwrap();
    run(&small(ExperimentKind::Density), dir.path()).unwrap();
    let lp = std::fs::read_to_string(dir.path().join("lp_norms.csv")).unwrap();
    assert!(lp.starts_with("t,norm,se,rhs\n"));
    assert!(!lp.contains('\r'));
    let cols = lp.lines().map(|l| l.split(',').count()).collect::<Vec<_>>();
    assert!(cols.iter().all(|&c| c == 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn numeric_configs_round_trip(
        horizon in 0.1f64..10.0,
        steps in 1u32..2000,
        p in 1.01f64..8.0,
        q in 1.01f64..4.0,
        delta in 1e-3f64..10.0,
        eps in prop::collection::vec(1e-6f64..0.5, 2..6),
        seed in any::<u64>(),
        omegas in 1usize..100_000,
    ) {
        let mut c = ExperimentConfig::default_for(ExperimentKind::Derivative);
        c.numerics.horizon = horizon;
        c.numerics.dt = horizon / steps as f64;
        c.numerics.p = p;
        c.numerics.q = q;
        c.measure.alpha = q + 0.5 + 1.0;
        c.numerics.delta = delta;
        c.numerics.epsilons = eps;
        c.seed = seed;
        c.budgets.omegas = omegas;
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&back, &c);
        let json: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        prop_assert_eq!(json, c);
    }
}
