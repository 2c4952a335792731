use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stochflow::coefficients::{block_independence, CoefficientField, DerivativeProvider, Family};
use stochflow::derivative::{
    clipped_derivative_metric, derivative_flow, difference_flow, lift, pointwise_domination, verify_hypotheses,
    weak_derivative_convergence, DerivativeSystem, LiftedMeasures,
};
use stochflow::flow::{initial_points, BrownianDriver, FlowEnsemble};
use stochflow::Error;

const DRIFT: [[f64; 2]; 2] = [[-0.5, 0.3], [-0.3, -0.5]];

fn linear(sigma: Vec<Vec<f64>>, geometric: f64) -> CoefficientField {
    Family::Linear { drift: DRIFT.iter().map(|r| r.to_vec()).collect(), sigma, geometric }.build().unwrap()
}

fn scalar(drift: f64, sigma: f64, geometric: f64) -> CoefficientField {
    Family::Linear { drift: vec![vec![drift]], sigma: vec![vec![sigma]], geometric }.build().unwrap()
}

fn starts(sys: &DerivativeSystem, q: f64, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let m = LiftedMeasures::default_for(sys.dim(), q).unwrap();
    initial_points(&m.joint, seed, "xy", count).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `exp(A t) y` by a truncated power series.
fn expm_apply(a: [[f64; 2]; 2], t: f64, y: &[f64]) -> [f64; 2] {
    let mut term = [y[0], y[1]];
    let mut sum = term;
    for k in 1..40 {
        let next = [
            t / k as f64 * (a[0][0] * term[0] + a[0][1] * term[1]),
            t / k as f64 * (a[1][0] * term[0] + a[1][1] * term[1]),
        ];
        term = next;
        sum[0] += term[0];
        sum[1] += term[1];
    }
    sum
}

#[test]
fn lift_requires_analytic_unstructured_base() {
    let fd = Family::Ou { dim: 1, theta: 1.0, s: 1.0 }.build().unwrap().with_provider(DerivativeProvider::finite_difference());
    assert!(matches!(lift(&fd), Err(Error::DerivativeUnavailable(_))));
    let partial = Family::PartialSobolev { s1: 0.5, s2: 0.5, a: 1.0, step: 0.5 }.build().unwrap();
    assert!(matches!(lift(&partial), Err(Error::DerivativeUnavailable(_))));
}

#[test]
fn linear_lift_is_a_y() {
    let sys = lift(&linear(vec![vec![0.5, 0.0], vec![0.2, 0.4]], 0.0)).unwrap();
    assert_eq!(sys.lifted.dim(), 4);
    assert_eq!(sys.lifted.block(), Some(2));
    for z in [[0.3, -1.0, 2.0, 0.5], [10.0, 4.0, -1.0, 3.0]] {
        let b = sys.lifted.drift(&z).unwrap();
        let s = sys.lifted.sigma(&z).unwrap();
        for i in 0..2 {
            let ay = DRIFT[i][0] * z[2] + DRIFT[i][1] * z[3];
            assert!((b[2 + i] - ay).abs() < 1e-15);
            for k in 0..2 {
                assert_eq!(s.get(2 + i, k), 0.0);
            }
        }
        for eps in [0.5, 0.125, 1e-3] {
            let fe = sys.epsilon(eps).unwrap();
            let b = fe.drift(&z).unwrap();
            for i in 0..2 {
                let ay = DRIFT[i][0] * z[2] + DRIFT[i][1] * z[3];
                assert!((b[2 + i] - ay).abs() < 1e-11 * (1.0 + 1.0 / eps), "eps {eps}");
            }
        }
    }
}

#[test]
fn lifted_fields_are_block_structured() {
    let sys = lift(&Family::SmoothNonlinear { dim: 2, a: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    assert_eq!(block_independence(&sys.lifted, 200, &mut rng(1)).unwrap(), 0.0);
    assert_eq!(block_independence(&sys.epsilon(0.25).unwrap(), 200, &mut rng(2)).unwrap(), 0.0);
}

#[test]
fn lifted_jacobian_in_y_matches_differences() {
    let sys = lift(&Family::SmoothNonlinear { dim: 2, a: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    let fe = sys.epsilon(0.25).unwrap();
    let z = [0.4, -0.7, 1.3, 0.2];
    for f in [&sys.lifted, &fe] {
        let e = f.jacobian(&z).unwrap();
        let h = 1e-6;
        for j in 2..4 {
            let (mut up, mut down) = (z, z);
            up[j] += h;
            down[j] -= h;
            let (bu, bd) = (f.drift(&up).unwrap(), f.drift(&down).unwrap());
            let (su, sd) = (f.sigma(&up).unwrap(), f.sigma(&down).unwrap());
            for i in 0..4 {
                assert!((e.ddrift_at(j, i) - (bu[i] - bd[i]) / (2.0 * h)).abs() < 1e-7);
                for k in 0..2 {
                    assert!((e.dsigma_at(j, i, k) - (su.get(i, k) - sd.get(i, k)) / (2.0 * h)).abs() < 1e-7);
                }
            }
        }
    }
    // Cross derivatives of the derivative system would need second derivatives of the base.
    assert!(sys.lifted.jacobian(&z).unwrap().ddrift_at(0, 2).is_nan());
}

#[test]
fn lifted_measure_defaults_and_constraint() {
    let m = LiftedMeasures::default_for(1, 2.0).unwrap();
    assert_eq!(m.base.alpha(), 3.0);
    assert_eq!(m.joint.alpha(), 9.0);
    assert_eq!(m.joint.dim(), 2);
    let err = LiftedMeasures::new(1, 2.0, 3.0, 8.5).unwrap_err().to_string();
    assert!(err.contains("alpha must exceed"), "{err}");
}

#[test]
fn constant_sigma_linear_drift_follows_matrix_exponential() {
    let sys = lift(&linear(vec![vec![0.5, 0.0], vec![0.2, 0.4]], 0.0)).unwrap();
    let s = starts(&sys, 2.0, 3, 100);
    let dt = 1.0 / 512.0;
    let driver = BrownianDriver::new(2, dt, 3, 100).unwrap();
    let e = derivative_flow(&sys, &driver, &s, 1.0, 512).unwrap();
    for (j, start) in s.iter().enumerate() {
        let y = &e.terminal(j)[2..];
        let exact = expm_apply(DRIFT, 1.0, &start[2..]);
        let scale = start[2].hypot(start[3]);
        for i in 0..2 {
            assert!((y[i] - exact[i]).abs() <= dt * scale, "{} vs {}", y[i], exact[i]);
        }
    }
}

#[test]
fn geometric_brownian_motion_oracle() {
    let c = 0.6;
    let sys = lift(&scalar(0.0, 0.0, c)).unwrap();
    let s = starts(&sys, 2.0, 4, 200);
    let dt = 1.0 / 1024.0;
    let driver = BrownianDriver::new(1, dt, 4, 200).unwrap();
    let e = derivative_flow(&sys, &driver, &s, 1.0, 1024).unwrap();
    let mut sq = 0.0;
    for (j, start) in s.iter().enumerate() {
        let t = e.terminal(j);
        // Y = y X / x holds step by step under Euler-Maruyama.
        assert!((t[1] - start[1] * t[0] / start[0]).abs() <= 1e-12 * (1.0 + t[1].abs()));
        let b = driver.path(j, 1024)[1024];
        let exact = start[1] * (c * b - 0.5 * c * c).exp();
        sq += ((t[1] - exact) / exact).powi(2);
    }
    let rms = (sq / s.len() as f64).sqrt();
    assert!(rms < 10.0 * dt.sqrt(), "rms {rms}");
}

#[test]
fn zero_direction_gives_zero_derivative() {
    let sys = lift(&Family::SmoothNonlinear { dim: 1, a: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    let s: Vec<Vec<f64>> = [-1.0, 0.2, 3.0].iter().map(|&x| vec![x, 0.0]).collect();
    let driver = BrownianDriver::new(1, 1.0 / 128.0, 5, 3).unwrap();
    let e = derivative_flow(&sys, &driver, &s, 1.0, 1).unwrap();
    for t in &e.trajectories {
        assert!(t.states.chunks(2).all(|z| z[1] == 0.0));
    }
}

fn scaled_starts(s: &[Vec<f64>], d: usize, factor: f64) -> Vec<Vec<f64>> {
    s.iter().map(|z| z.iter().enumerate().map(|(i, v)| if i >= d { factor * v } else { *v }).collect()).collect()
}

#[test]
fn derivative_is_linear_in_direction() {
    let sys = lift(&Family::SmoothNonlinear { dim: 2, a: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    let s = starts(&sys, 2.0, 6, 50);
    let driver = BrownianDriver::new(2, 1.0 / 128.0, 6, 50).unwrap();
    let one = derivative_flow(&sys, &driver, &s, 1.0, 1).unwrap();
    let two = derivative_flow(&sys, &driver, &scaled_starts(&s, 2, 2.0), 1.0, 1).unwrap();
    for (a, b) in one.trajectories.iter().zip(&two.trajectories) {
        for (u, v) in a.states.chunks(4).zip(b.states.chunks(4)) {
            assert_eq!(&u[..2], &v[..2]);
            assert_eq!(2.0 * u[2], v[2]);
            assert_eq!(2.0 * u[3], v[3]);
        }
    }
}

fn second_block_gap(a: &FlowEnsemble, b: &FlowEnsemble) -> f64 {
    let d = a.dim / 2;
    let mut worst: f64 = 0.0;
    for (u, v) in a.trajectories.iter().zip(&b.trajectories) {
        for (p, q) in u.states.chunks(a.dim).zip(v.states.chunks(a.dim)) {
            for i in d..a.dim {
                worst = worst.max((p[i] - q[i]).abs());
            }
        }
    }
    worst
}

#[test]
fn linear_differences_are_exact() {
    let sys = lift(&linear(vec![vec![0.5, 0.0], vec![0.2, 0.4]], 0.0)).unwrap();
    let s = starts(&sys, 2.0, 7, 100);
    let driver = BrownianDriver::new(2, 1.0 / 256.0, 7, 100).unwrap();
    let y = derivative_flow(&sys, &driver, &s, 1.0, 4).unwrap();
    for eps in [0.5, 0.25, 0.125, 0.0625] {
        let ye = difference_flow(&sys, eps, &driver, &s, 1.0, 4).unwrap();
        assert!(second_block_gap(&y, &ye) < 1e-12 / eps, "eps {eps}");
        let again = difference_flow(&sys, eps, &driver, &s, 1.0, 4).unwrap();
        assert_eq!(ye, again);
    }
    let m = LiftedMeasures::default_for(2, 2.0).unwrap();
    let t = weak_derivative_convergence(&sys, &[0.5, 0.25], &driver, &s, &m.joint, 1.0, 4).unwrap();
    assert!(t.rows.iter().all(|r| r.metric.value < 1e-10));
}

#[test]
fn smooth_differences_shrink_like_epsilon() {
    let sys = lift(&Family::SmoothNonlinear { dim: 1, a: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    let s = starts(&sys, 2.0, 8, 300);
    let driver = BrownianDriver::new(1, 1.0 / 128.0, 8, 300).unwrap();
    let y = derivative_flow(&sys, &driver, &s, 1.0, 1).unwrap();
    let coarse = second_block_gap(&y, &difference_flow(&sys, 1e-2, &driver, &s, 1.0, 1).unwrap());
    let fine = second_block_gap(&y, &difference_flow(&sys, 1e-3, &driver, &s, 1.0, 1).unwrap());
    assert!(fine < 0.2 * coarse, "{fine} vs {coarse}");
    assert!(fine < 1e-2);
}

#[test]
fn derivative_matches_jacobian_vector_product() {
    let base = Family::SmoothNonlinear { dim: 2, a: 0.5, s: 0.5 }.build().unwrap();
    let sys = lift(&base).unwrap();
    let s = starts(&sys, 2.0, 9, 200);
    let dt = 1.0 / 256.0;
    let driver = BrownianDriver::new(2, dt, 9, 200).unwrap();
    let y = derivative_flow(&sys, &driver, &s, 1.0, 256).unwrap();
    let h = 1e-4;
    let shift = |sign: f64| -> Vec<Vec<f64>> { s.iter().map(|z| vec![z[0] + sign * h * z[2], z[1] + sign * h * z[3]]).collect() };
    let up = stochflow::flow::integrate(&base, &driver, &shift(1.0), stochflow::flow::Pairing::Diagonal, 1.0, 256).unwrap();
    let down = stochflow::flow::integrate(&base, &driver, &shift(-1.0), stochflow::flow::Pairing::Diagonal, 1.0, 256).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..s.len() {
        let (u, d, t) = (up.terminal(j), down.terminal(j), y.terminal(j));
        for i in 0..2 {
            let jvp = (u[i] - d[i]) / (2.0 * h);
            num += (t[2 + i] - jvp).powi(2);
            den += jvp * jvp;
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel < 10.0 * dt.sqrt(), "relative rms {rel}");
}

#[test]
fn hypotheses_for_linear_base() {
    let sys = lift(&linear(vec![vec![0.5, 0.0], vec![0.2, 0.4]], 0.0)).unwrap();
    let m = LiftedMeasures::default_for(2, 2.0).unwrap();
    for p0 in [0.5, 3.0] {
        let r = verify_hypotheses(&sys, &m, p0, &[0.5, 0.25, 0.125], 4000, 2000, &mut rng(10)).unwrap();
        assert!(r.pass, "p0 {p0}: {r:?}");
    }
}

#[test]
fn hypotheses_for_rough_base() {
    let sys = lift(&Family::RoughSobolev { gamma: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    let m = LiftedMeasures::default_for(1, 2.0).unwrap();
    let r = verify_hypotheses(&sys, &m, 1.5, &[0.5, 0.25, 0.125], 8000, 10_000, &mut rng(11)).unwrap();
    assert_eq!(r.domination.drift_pass, 10_000);
    assert_eq!(r.domination.sigma_pass, 10_000);
    assert!(r.band_ratio < 10.0, "band {}", r.band_ratio);
    assert!(r.pass, "{r:?}");
    assert!(verify_hypotheses(&sys, &m, 1.5, &[0.75], 100, 10, &mut rng(11)).is_err());
}

#[test]
fn domination_holds_for_geometric_noise() {
    let sys = lift(&Family::Linear {
        drift: vec![vec![-1.0, 2.0], vec![0.5, -0.3]],
        sigma: vec![vec![0.1, 0.0], vec![0.0, 0.2]],
        geometric: 1.5,
    }
    .build()
    .unwrap())
    .unwrap();
    let m = LiftedMeasures::default_for(2, 2.0).unwrap();
    assert!(pointwise_domination(&sys, &m.joint, 5000, &mut rng(12)).unwrap().all_pass());
}

#[test]
fn smooth_convergence_is_strictly_decreasing() {
    let sys = lift(&Family::SmoothNonlinear { dim: 1, a: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    let m = LiftedMeasures::default_for(1, 2.0).unwrap();
    let s = starts(&sys, 2.0, 13, 500);
    let driver = BrownianDriver::new(1, 1.0 / 128.0, 13, 500).unwrap();
    let t = weak_derivative_convergence(&sys, &[0.5, 0.25, 0.125, 0.0625], &driver, &s, &m.joint, 1.0, 1).unwrap();
    assert!(t.strictly_decreasing, "{:?}", t.rows);
    assert!(t.reduction < 0.25);
    let mut out = Vec::new();
    t.write_csv(&mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().starts_with("epsilon,metric,se\n5e-1,"));
}

#[test]
fn rough_convergence_decreases() {
    let sys = lift(&Family::RoughSobolev { gamma: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    let m = LiftedMeasures::default_for(1, 2.0).unwrap();
    let s = starts(&sys, 2.0, 15, 1000);
    let driver = BrownianDriver::new(1, 1.0 / 64.0, 15, 1000).unwrap();
    let t = weak_derivative_convergence(&sys, &[0.5, 0.25, 0.125, 0.0625], &driver, &s, &m.joint, 1.0, 1).unwrap();
    assert!(t.strictly_decreasing, "{:?}", t.rows);
    assert!(t.reduction < 0.25, "{}", t.reduction);
}

#[test]
fn metric_rejects_mismatched_ensembles() {
    let sys = lift(&Family::SmoothNonlinear { dim: 1, a: 0.5, s: 0.5 }.build().unwrap()).unwrap();
    let m = LiftedMeasures::default_for(1, 2.0).unwrap();
    let d = BrownianDriver::new(1, 1.0 / 64.0, 14, 20).unwrap();
    let a = derivative_flow(&sys, &d, &starts(&sys, 2.0, 14, 20), 1.0, 1).unwrap();
    let b = derivative_flow(&sys, &d, &starts(&sys, 2.0, 14, 20), 0.5, 1).unwrap();
    assert!(clipped_derivative_metric(&a, &b, &m.joint).is_err());
    assert!(difference_flow(&sys, 0.0, &d, &starts(&sys, 2.0, 14, 20), 1.0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_differences_exact_for_any_epsilon(eps in 1e-3f64..0.5, seed in 0u64..1000) {
        let sys = lift(&scalar(-0.7, 0.4, 0.0)).unwrap();
        let s = starts(&sys, 2.0, seed, 10);
        let d = BrownianDriver::new(1, 1.0 / 64.0, seed, 10).unwrap();
        let y = derivative_flow(&sys, &d, &s, 1.0, 1).unwrap();
        let ye = difference_flow(&sys, eps, &d, &s, 1.0, 1).unwrap();
        prop_assert!(second_block_gap(&y, &ye) < 1e-12 / eps);
    }

    #[test]
    fn derivative_scales_with_direction(factor in -4.0f64..4.0, seed in 0u64..1000) {
        let sys = lift(&Family::SmoothNonlinear { dim: 1, a: 0.5, s: 0.5 }.build().unwrap()).unwrap();
        let s = starts(&sys, 2.0, seed, 5);
        let d = BrownianDriver::new(1, 1.0 / 64.0, seed, 5).unwrap();
        let one = derivative_flow(&sys, &d, &s, 1.0, 1).unwrap();
        let scaled = derivative_flow(&sys, &d, &scaled_starts(&s, 1, factor), 1.0, 1).unwrap();
        for (a, b) in one.trajectories.iter().zip(&scaled.trajectories) {
            for (u, v) in a.states.chunks(2).zip(b.states.chunks(2)) {
                prop_assert!((factor * u[1] - v[1]).abs() <= 1e-12 * (1.0 + v[1].abs()));
            }
        }
    }
}
