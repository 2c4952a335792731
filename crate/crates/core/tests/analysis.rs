use proptest::prelude::*;
use rand::Rng;
use stochflow::analysis::{
    lambda0, lambda0_closed_form, lambda0_profile, local_maximal, maximal_constant, maximal_exp_check,
    maximal_lp_check, partial_maximal, pointwise_sobolev_check, random_piecewise, Axis, GridFunction,
};
use stochflow::{seed, Error, ReferenceMeasure};

fn mu(n: usize, a: f64) -> ReferenceMeasure {
    ReferenceMeasure::new(n, a).unwrap()
}

fn grid1(lo: f64, hi: f64, h: f64, f: impl Fn(f64) -> f64) -> GridFunction {
    GridFunction::from_fn(vec![Axis::covering(lo, hi, h).unwrap()], |x| f(x[0])).unwrap()
}

fn grid2(lo: f64, hi: f64, h: f64, f: impl Fn(f64, f64) -> f64) -> GridFunction {
    let a = Axis::covering(lo, hi, h).unwrap();
    GridFunction::from_fn(vec![a, a], |x| f(x[0], x[1])).unwrap()
}

#[test]
fn constant_function_is_its_own_maximal_function() {
    let g = grid2(-2.0, 2.0, 0.25, |_, _| -1.5);
    let mf = local_maximal(&g, 1.0).unwrap();
    assert!(mf.values.iter().all(|&v| (v - 1.5).abs() < 1e-12));
}

#[test]
fn single_cell_far_field_decays_like_inverse_ball_count() {
    let h = 0.1;
    let g = grid1(-3.05, 3.05, h, |x| if x.abs() < 0.5 * h { 1.0 } else { 0.0 });
    assert_eq!(g.values.iter().filter(|&&v| v == 1.0).count(), 1);
    let center = g.values.iter().position(|&v| v == 1.0).unwrap();
    let mf = local_maximal(&g, 2.0).unwrap();
    for d in 0..=25usize {
        let expect = if d <= 20 { 1.0 / (2 * d + 1) as f64 } else { 0.0 };
        assert!((mf.values[center + d] - expect).abs() < 1e-12, "d={d}");
    }

    let g = grid2(-2.1, 2.1, 0.2, |x, y| if x.abs() < 0.1 && y.abs() < 0.1 { 1.0 } else { 0.0 });
    assert_eq!(g.values.iter().filter(|&&v| v == 1.0).count(), 1);
    let mf = local_maximal(&g, 1.0).unwrap();
    let n = g.axes[1].len;
    let c = g.values.iter().position(|&v| v == 1.0).unwrap();
    let count = |r: i64| {
        let mut c = 0;
        for i in -r..=r {
            for j in -r..=r {
                if i * i + j * j <= r * r {
                    c += 1;
                }
            }
        }
        c as f64
    };
    for (di, dj) in [(0i64, 0i64), (1, 0), (1, 1), (2, 1), (3, 3), (4, 2)] {
        let dist = ((di * di + dj * dj) as f64).sqrt();
        let r = dist.ceil() as i64;
        let expect = if r <= 5 { 1.0 / count(r) } else { 0.0 };
        let idx = (c as i64 + di * n as i64 + dj) as usize;
        assert!((mf.values[idx] - expect).abs() < 1e-12, "offset ({di},{dj})");
    }
}

#[test]
fn delta_below_step_is_rejected() {
    let g = grid1(-1.0, 1.0, 0.1, |x| x);
    assert!(matches!(local_maximal(&g, 0.05), Err(Error::InvalidParameter(_))));
    let g2 = grid2(-1.0, 1.0, 0.1, |x, _| x);
    assert!(matches!(partial_maximal(&g2, 0.01), Err(Error::InvalidParameter(_))));
    assert!(matches!(partial_maximal(&g, 0.5), Err(Error::Dimension(_))));
}

#[test]
fn partial_maximal_cases() {
    let u = |x: f64| 1.0 + x.sin();
    let v = |y: f64| if y.abs() < 0.7 { y } else { 0.0 };
    let only_x1 = grid2(-2.0, 2.0, 0.1, |x, _| u(x));
    let pm = partial_maximal(&only_x1, 0.5).unwrap();
    for (a, b) in pm.values.iter().zip(&only_x1.values) {
        assert!((a - b.abs()).abs() < 1e-12);
    }

    let sep = grid2(-2.0, 2.0, 0.1, |x, y| u(x) * v(y));
    let pm = partial_maximal(&sep, 0.5).unwrap();
    let ax = sep.axes[1];
    let vgrid = GridFunction::from_fn(vec![ax], |y| v(y[0])).unwrap();
    let mv = local_maximal(&vgrid, 0.5).unwrap();
    for i in 0..sep.axes[0].len {
        let ux = u(sep.axes[0].coord(i)).abs();
        for j in 0..ax.len {
            let got = pm.values[i * ax.len + j];
            assert!((got - ux * mv.values[j]).abs() < 1e-12 * (1.0 + got));
        }
    }
}

#[test]
fn lambda0_scan_matches_closed_form() {
    for alpha in [1.0, 1.5, 3.0] {
        for delta in [1.0, 2.0, 5.0] {
            let scan = lambda0(&mu(1, alpha), delta).unwrap();
            let closed = lambda0_closed_form(alpha, delta).unwrap();
            assert!((scan.value / closed - 1.0).abs() < 1e-6, "alpha={alpha} delta={delta}");
            // rings 1 and 2 tie at delta = 1
            assert!(scan.argmax == 1 || (delta == 1.0 && scan.argmax == 2));
            assert!(!scan.growing);
        }
    }
    assert!((lambda0(&mu(1, 1.0), 1.0).unwrap().value - 5.0).abs() < 1e-12);
    assert!(lambda0_closed_form(1.0, 0.5).is_err());
}

#[test]
fn gaussian_profile_has_unbounded_ring_ratio() {
    let scan = lambda0_profile(|s| (-s * s).exp(), 1.0, 50).unwrap();
    assert!(scan.growing, "{scan:?}");
    let power = lambda0_profile(|s| (1.0 + s * s).powf(-2.0), 1.0, 50).unwrap();
    assert!(!power.growing);
}

#[test]
fn maximal_constant_formula() {
    assert_eq!(maximal_constant(1, 2.0), 40.0);
    assert_eq!(maximal_constant(2, 2.0), 200.0);
}

#[test]
fn zero_function_checks() {
    let m = mu(1, 1.5);
    let g = grid1(-3.0, 3.0, 0.1, |_| 0.0);
    let lp = maximal_lp_check(&g, &m, 1.0, 2.0).unwrap();
    assert!(lp.pass && lp.lhs == 0.0 && lp.rhs == 0.0);
    let ex = maximal_exp_check(&g, &m, 1.0, 0.5).unwrap();
    let mass = m.total_mass().unwrap();
    assert!((ex.lhs - mass).abs() < 1e-9);
    assert!((ex.rhs - mass * (1.0 + ex.factor)).abs() < 1e-9 * ex.rhs);
    assert!(ex.pass);
    let g = random_piecewise(1, 2.0, 1.0, 0.1, 8, &mut seed::stream(1, "g", 0)).unwrap();
    let flat = maximal_exp_check(&g, &m, 1.0, 0.0).unwrap();
    assert!(flat.pass && (flat.lhs - mass).abs() < 1e-9);
}

#[test]
fn maximal_inequalities_hold_on_random_functions() {
    let mut rng = seed::stream(42, "maximal", 0);
    for n in [1usize, 2] {
        for p in [1.5, 2.0, 4.0] {
            for delta in [0.5, 1.0, 2.0] {
                let m = mu(n, 1.5);
                let h = if n == 1 { delta / 8.0 } else { delta / 4.0 };
                let mut worst: f64 = 0.0;
                for _ in 0..200 {
                    let pieces = rng.random_range(1..=10);
                    let g = random_piecewise(n, 2.0, delta, h, pieces, &mut rng).unwrap();
                    let rep = maximal_lp_check(&g, &m, delta, p).unwrap();
                    assert!(rep.pass, "n={n} p={p} delta={delta}: {rep:?}");
                    worst = worst.max(rep.ratio);
                }
                assert!(worst < 1.0);
            }
        }
    }
}

#[test]
fn exponential_maximal_inequality_on_random_functions() {
    let mut rng = seed::stream(43, "maximal", 0);
    for n in [1usize, 2] {
        for delta in [0.5, 1.0, 2.0] {
            for theta in [0.25, 0.5] {
                let m = mu(n, 1.5);
                let h = if n == 1 { delta / 8.0 } else { delta / 4.0 };
                for _ in 0..50 {
                    let g = random_piecewise(n, 2.0, delta, h, 6, &mut rng).unwrap();
                    let rep = maximal_exp_check(&g, &m, delta, theta).unwrap();
                    assert!(rep.pass, "{rep:?}");
                }
            }
        }
    }
}

#[test]
fn pointwise_sobolev_fits() {
    let mut rng = seed::stream(5, "pairs", 0);
    let slope = 0.7;
    let f = grid2(-2.0, 2.0, 0.05, |_, y| slope * y);
    let gr = grid2(-2.0, 2.0, 0.05, |_, _| slope);
    let fit = pointwise_sobolev_check(&f, &gr, 0.5, 2000, &mut rng).unwrap();
    assert!(fit.constant <= 1.0 && fit.constant > 0.0);

    let c = grid2(-2.0, 2.0, 0.05, |_, _| 3.0);
    let z = grid2(-2.0, 2.0, 0.05, |_, _| 0.0);
    assert_eq!(pointwise_sobolev_check(&c, &z, 0.5, 500, &mut rng).unwrap().constant, 0.0);

    // h is piecewise linear; the x1 factor g is a step function or constant
    let h = |y: f64| (1.0 - y.abs()).max(0.0) + 0.3 * y;
    let dh = |y: f64| (if y.abs() < 1.0 { -y.signum() } else { 0.0 } + 0.3f64).abs();
    let rough = |x: f64| if x > 0.3 { 2.0 } else { -1.0 };
    let fit_for = |g: &dyn Fn(f64) -> f64, r: f64| {
        let f = grid2(-2.0, 2.0, 0.05, |x, y| g(x) * h(y));
        let gr = grid2(-2.0, 2.0, 0.05, |x, y| g(x).abs() * dh(y));
        pointwise_sobolev_check(&f, &gr, r, 4000, &mut seed::stream(6, "pairs", 0)).unwrap()
    };
    let a = fit_for(&rough, 0.5);
    let b = fit_for(&|_| 1.0, 0.5);
    assert!(a.constant.is_finite());
    assert!((a.constant - b.constant).abs() < 1e-9 * b.constant, "{a:?} vs {b:?}");
    let wide = fit_for(&rough, 1.0);
    assert!(wide.constant.is_finite() && (wide.constant / a.constant) < 2.0 && (a.constant / wide.constant) < 2.0);
}

#[test]
fn grid_csv_round_trip() {
    let g = grid2(-1.0, 1.0, 0.25, |x, y| x * x - y);
    let mut buf = Vec::new();
    g.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("x0,x1,value\n"));
    let back = GridFunction::read_csv(std::io::Cursor::new(buf)).unwrap();
    assert_eq!(back.axes.len(), 2);
    for (a, b) in back.values.iter().zip(&g.values) {
        assert_eq!(a, b);
    }
    assert!((back.axes[0].step - 0.25).abs() < 1e-12);
    assert!(GridFunction::new(vec![Axis::new(0.0, 1.0, 2).unwrap()], vec![1.0, f64::NAN]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn maximal_dominates_and_is_sublinear(seed_a in 0u64..10_000, seed_b in 0u64..10_000, two in any::<bool>()) {
        let n = if two { 2 } else { 1 };
        let f = random_piecewise(n, 1.5, 1.0, 0.25, 5, &mut seed::stream(seed_a, "f", 0)).unwrap();
        let g = random_piecewise(n, 1.5, 1.0, 0.25, 5, &mut seed::stream(seed_b, "g", 0)).unwrap();
        let sum = GridFunction::new(f.axes.clone(), f.values.iter().zip(&g.values).map(|(a, b)| a + b).collect()).unwrap();
        let (mf, mg, ms) = (local_maximal(&f, 1.0).unwrap(), local_maximal(&g, 1.0).unwrap(), local_maximal(&sum, 1.0).unwrap());
        for i in 0..f.len() {
            prop_assert!(mf.values[i] >= f.values[i].abs());
            prop_assert!(ms.values[i] <= mf.values[i] + mg.values[i] + 1e-12);
        }
    }

    #[test]
    fn partial_maximal_is_slicewise_local_maximal(s in 0u64..10_000, r in 1usize..6) {
        let f = random_piecewise(2, 1.5, 1.0, 0.2, 4, &mut seed::stream(s, "f", 0)).unwrap();
        let radius = r as f64 * 0.2;
        let pm = partial_maximal(&f, radius).unwrap();
        let ax = f.axes[1];
        for (i, slice) in f.values.chunks(ax.len).enumerate() {
            let one = local_maximal(&GridFunction::new(vec![ax], slice.to_vec()).unwrap(), radius).unwrap();
            for j in 0..ax.len {
                prop_assert_eq!(pm.values[i * ax.len + j].to_bits(), one.values[j].to_bits());
            }
        }
    }
}
