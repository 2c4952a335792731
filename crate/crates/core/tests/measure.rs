mod common;

use common::{rel, simpson, simpson_tail};
use proptest::prelude::*;
use stochflow::linalg::norm;
use stochflow::{seed, ReferenceMeasure};

fn mu(n: usize, a: f64) -> ReferenceMeasure {
    ReferenceMeasure::new(n, a).unwrap()
}

fn radial_oracle(n: usize, alpha: f64, g: impl Fn(f64) -> f64) -> f64 {
    let area = ReferenceMeasure::sphere_area(n);
    let f = |r: f64| r.powi(n as i32 - 1) * g(r) * (1.0 + r * r).powf(-alpha);
    area * (simpson(&f, 0.0, 1.0, 1e-14) + simpson_tail(&f, 1.0, 1e-14))
}

#[test]
fn total_mass_matches_quadrature() {
    for (n, a) in [(1, 1.0), (2, 2.0), (1, 1.5), (2, 2.5), (3, 2.0), (3, 4.5), (4, 3.1)] {
        let exact = mu(n, a).total_mass().unwrap();
        let oracle = radial_oracle(n, a, |_| 1.0);
        assert!(rel(exact, oracle) < 1e-8, "n={n} a={a}: {exact} vs {oracle}");
    }
}

#[test]
fn student_t_draws_match_radial_cdf() {
    let m = mu(1, 1.5);
    let mass = m.total_mass().unwrap();
    let cdf = |x: f64| {
        let f = |t: f64| (1.0 + t * t).powf(-1.5);
        let half = 0.5;
        if x >= 0.0 {
            half + simpson(&f, 0.0, x, 1e-12) / mass
        } else {
            half - simpson(&f, x, 0.0, 1e-12) / mass
        }
    };
    let mut rng = seed::stream(2024, "ks", 0);
    let mut xs: Vec<f64> = m.sample(&mut rng, 100_000).unwrap().into_iter().map(|p| p[0]).collect();
    xs.sort_by(f64::total_cmp);
    let count = xs.len() as f64;
    // The CDF is evaluated on a thinned subset; between evaluated points it is monotone.
    let mut ks: f64 = 0.0;
    for (i, x) in xs.iter().enumerate().step_by(97) {
        let c = cdf(*x);
        ks = ks.max((c - i as f64 / count).abs()).max((c - (i + 1) as f64 / count).abs());
    }
    assert!(ks < 0.01, "KS distance {ks}");
}

#[test]
fn expect_abs_matches_quadrature() {
    let m = mu(1, 1.5);
    let oracle = radial_oracle(1, 1.5, |r| r);
    let mut rng = seed::stream(7, "expect", 0);
    let e = m.expect(|x| x[0].abs(), 200_000, &mut rng).unwrap();
    assert!((e.estimate.value - oracle).abs() < 3.0 * e.estimate.se, "{e:?} vs {oracle}");
    assert!(rel(m.abs_moment().unwrap(), oracle) < 1e-8);
}

#[test]
fn derivatives_match_central_differences() {
    let h = 1e-5;
    let mut rng = seed::stream(3, "fd", 0);
    use rand::Rng;
    for &(n, a) in &[(1usize, 1.0), (2, 2.5), (3, 4.0)] {
        let m = mu(n, a);
        for _ in 0..200 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0 / (n as f64).sqrt()..10.0 / (n as f64).sqrt())).collect();
            let g = m.grad_log_weight(&x).unwrap();
            let hess = m.hess_log_weight(&x).unwrap();
            let mut fd_g = vec![0.0; n];
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                fd_g[j] = (m.log_weight(&xp).unwrap() - m.log_weight(&xm).unwrap()) / (2.0 * h);
                let gp = m.grad_log_weight(&xp).unwrap();
                let gm = m.grad_log_weight(&xm).unwrap();
                let col: Vec<f64> = (0..n).map(|i| (gp[i] - gm[i]) / (2.0 * h)).collect();
                let exact: Vec<f64> = (0..n).map(|i| hess.get(i, j)).collect();
                let diff: Vec<f64> = col.iter().zip(&exact).map(|(a, b)| a - b).collect();
                assert!(norm(&diff) <= 1e-6 * norm(&exact).max(1e-3), "hess col {j} at {x:?}");
            }
            let diff: Vec<f64> = fd_g.iter().zip(&g).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) <= 1e-6 * norm(&g).max(1e-3), "grad at {x:?}");
        }
    }
}

proptest! {
    #[test]
    fn exp_log_weight_is_weight(x in prop::collection::vec(-50.0f64..50.0, 1..4), alpha in 0.6f64..8.0) {
        let m = mu(x.len(), alpha);
        let w = m.weight(&x).unwrap();
        prop_assert!(w > 0.0 && w <= 1.0);
        prop_assert!((m.log_weight(&x).unwrap().exp() - w).abs() <= 1e-13 * w);
    }

    #[test]
    fn hessian_is_symmetric(x in prop::collection::vec(-50.0f64..50.0, 1..5), alpha in 0.1f64..8.0) {
        let m = mu(x.len(), alpha);
        prop_assert!(m.hess_log_weight(&x).unwrap().is_symmetric(0.0));
    }

    #[test]
    fn sampling_is_deterministic(master in any::<u64>()) {
        let m = mu(2, 2.0);
        let a = m.sample(&mut seed::stream(master, "sample", 0), 5).unwrap();
        let b = m.sample(&mut seed::stream(master, "sample", 0), 5).unwrap();
        prop_assert_eq!(a, b);
    }
}
