use crosslearn::gaussian::*;
use proptest::prelude::*;

fn problem(epsilon0: f64, sigma_m: f64) -> GaussianProblem {
    GaussianProblem::with_sigma_m(epsilon0, sigma_m).unwrap()
}

/// Maclaurin series, accurate to a few ulp for |x| ≤ 2.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-20 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[test]
fn erf_matches_tabulated_values() {
    let table = [
        (0.5, 0.520_499_877_813_046_5),
        (1.0, 0.842_700_792_949_714_9),
        (2.0, 0.995_322_265_018_952_7),
        (3.0, 0.999_977_909_503_001_4),
    ];
    for (x, v) in table {
        assert!((erf(x) - v).abs() < 1e-15, "erf({x})");
        assert!((erf(-x) + v).abs() < 1e-15);
    }
    assert!((erfc(5.0) / 1.537_459_794_428_035e-12 - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn erf_matches_series(x in -2.0f64..2.0) {
        prop_assert!((erf(x) - erf_series(x)).abs() < 1e-13);
    }

    #[test]
    fn estimate_is_midpoint_plus_threshold(x in -50.0f64..50.0, y in -50.0f64..50.0, eps in 0.0f64..20.0) {
        let (mx, my) = cl_estimate(x, y, eps);
        let z = 0.5 * (x + y);
        let w = 0.5 * (x - y);
        let tol = 1e-14 * (1.0 + x.abs() + y.abs());
        prop_assert!((mx - (z + soft_threshold(w, eps))).abs() <= tol);
        prop_assert!((my - (z - soft_threshold(w, eps))).abs() <= tol);
        prop_assert!((mx - my).abs() <= eps + tol);
    }

    #[test]
    fn estimate_commutes_with_translation(x in -10.0f64..10.0, y in -10.0f64..10.0, c in -100.0f64..100.0, eps in 0.0f64..5.0) {
        let (a, b) = cl_estimate(x, y, eps);
        let (ac, bc) = cl_estimate(x + c, y + c, eps);
        prop_assert!((ac - c - a).abs() < 1e-12);
        prop_assert!((bc - c - b).abs() < 1e-12);
    }

    #[test]
    fn closed_form_is_positive_and_finite(e0 in 0.0f64..50.0, s in 0.01f64..20.0, eps in 0.0f64..100.0) {
        let m = mse_closed_form(&problem(e0, s), eps);
        prop_assert!(m.is_finite() && m > 0.0);
    }

    #[test]
    fn alpha_never_exceeds_beta(e0 in 0.0f64..50.0, s in 0.01f64..20.0, eps in 0.0f64..100.0) {
        let ab = AlphaBeta::new(&problem(e0, s), eps);
        prop_assert!(ab.alpha <= ab.beta);
    }
}

#[test]
fn closed_form_reference_points() {
    assert!((mse_closed_form(&problem(0.0, 1.0), 0.0) - 0.5).abs() < 1e-15);
    assert!((mse_closed_form(&problem(2.0, 1.0), 0.0) - 1.5).abs() < 1e-14);
    assert!((mse_closed_form(&problem(2.0, 1.0), 1e3) - 1.0).abs() < 1e-12);
    assert_eq!(mse_closed_form(&problem(2.0, 1.0), f64::INFINITY), 1.0);
    // sigma_M depends on sigma and M only through sigma / sqrt(M)
    let scaled = GaussianProblem::new(2.0, 2.0, 4).unwrap();
    assert!((mse_closed_form(&scaled, 1.3) - mse_closed_form(&problem(2.0, 1.0), 1.3)).abs() < 1e-15);
}

#[test]
fn consensus_value_is_half_variance_plus_bias() {
    for e0 in [0.0, 0.3, 1.0, 4.0] {
        for s in [0.1, 1.0, 3.0] {
            let expect = 0.5 * s * s + 0.25 * e0 * e0;
            assert!((mse_closed_form(&problem(e0, s), 0.0) - expect).abs() < 1e-12 * (1.0 + expect));
        }
    }
}

#[test]
fn bracket_is_monotone_and_bounded() {
    let xs: Vec<f64> = (0..=400).map(|i| -10.0 + 0.025 * i as f64).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| claim1_bracket(x).unwrap()).collect();
    for w in vals.windows(2) {
        assert!(w[1] <= w[0] + 1e-15);
    }
    for &v in &vals[..vals.len() - 1] {
        assert!(v > 1.0 && v <= 1.5);
    }
    assert_eq!(claim1_bracket(0.0).unwrap(), 1.0);
    assert!((claim1_bracket(-10.0).unwrap() - 1.5).abs() < 1e-6);
    let mid = claim1_bracket(-1.0).unwrap();
    assert!(mid > 1.0 && mid < 1.5);
    assert!(claim1_bracket(0.1).is_err());
    assert!(claim1_bracket(f64::NAN).is_err());
}

#[test]
fn bracket_reproduces_mse_at_true_gap() {
    for &e0 in &log_grid(1e-2, 1e2, 9) {
        for &s in &log_grid(1e-1, 1e1, 5) {
            let via_bracket = 0.5 * s * s * claim1_bracket(-e0 / s).unwrap();
            let direct = mse_closed_form(&problem(e0, s), e0);
            assert!((via_bracket - direct).abs() <= 1e-12 * direct);
        }
    }
}

#[test]
fn claim_one_holds_on_log_grid() {
    for &e0 in &log_grid(1e-3, 1e3, 10) {
        for &s in &log_grid(1e-2, 1e2, 10) {
            assert!(mse_closed_form(&problem(e0, s), e0) <= 0.75 * s * s + 1e-12, "e0 {e0} s {s}");
        }
    }
}

#[test]
fn claim_two_holds_on_log_grid() {
    for &e0 in &log_grid(1e-3, 1e3, 10) {
        for &s in &log_grid(1e-2, 1e2, 10) {
            let p = problem(e0, s);
            assert!(mse_derivative(&p, 0.0) < 0.0);
            let eps = claim2_witness(&p).expect("witness");
            assert!(eps > 0.0 && mse_change(&p, eps) < 0.0, "e0 {e0} s {s}");
        }
    }
}

#[test]
fn stable_change_agrees_with_direct_difference() {
    for (e0, s) in [(2.0, 1.0), (0.5, 0.3), (7.0, 2.0), (0.01, 1.0)] {
        let p = problem(e0, s);
        for k in 1..=30 {
            let eps = 0.1 * s * k as f64;
            let direct = mse_closed_form(&p, eps) - mse_closed_form(&p, 0.0);
            assert!((mse_change(&p, eps) - direct).abs() <= 1e-13 * (1.0 + mse_closed_form(&p, 0.0)));
        }
    }
}

#[test]
fn stable_change_resolves_tiny_gains() {
    // small gap: the optimum sits near eps0^2/(sqrt(pi) sigma_M) with gain about eps0^4/(4 pi sigma_M^2)
    let p = problem(1e-3, 100.0);
    let star = 1e-6 / (std::f64::consts::PI.sqrt() * 100.0);
    let gain = mse_change(&p, star);
    let expect = -1e-12 / (4.0 * std::f64::consts::PI * 1e4);
    assert!(gain < 0.0);
    assert!((gain / expect - 1.0).abs() < 1e-3, "{gain} vs {expect}");
}

#[test]
fn derivative_at_zero_has_erf_form() {
    for (e0, s) in [(2.0, 1.0), (0.5, 0.3), (7.0, 2.0)] {
        let expect = 0.5 * e0 * erf(-e0 / (2.0 * s));
        assert!((mse_derivative(&problem(e0, s), 0.0) - expect).abs() < 1e-14);
    }
    assert_eq!(mse_derivative(&problem(0.0, 1.0), 0.0), 0.0);
    assert_eq!(claim2_witness(&problem(0.0, 1.0)), None);
}

#[test]
fn derivative_matches_finite_differences() {
    let p = problem(2.0, 1.0);
    for k in 1..=20 {
        let eps = 0.3 * k as f64;
        let h = 1e-5 * (1.0 + eps);
        let fd = (mse_closed_form(&p, eps + h) - mse_closed_form(&p, eps - h)) / (2.0 * h);
        let d = mse_derivative(&p, eps);
        assert!((d - fd).abs() <= 1e-4 * d.abs().max(fd.abs()) + 1e-10, "eps {eps}: {d} vs {fd}");
    }
}

#[test]
fn derivative_turns_nonnegative_for_large_radius() {
    let p = problem(2.0, 1.0);
    assert!(mse_derivative(&p, 6.0) >= 0.0);
    assert!(mse_derivative(&p, 30.0) >= 0.0);
}

#[test]
fn closed_form_is_lipschitz_on_grid() {
    let p = problem(2.0, 1.0);
    let step = 0.01;
    let grid: Vec<f64> = (0..=1000).map(|i| step * i as f64).collect();
    let bound = grid.iter().map(|&e| mse_derivative(&p, e).abs()).fold(0.0, f64::max);
    for w in grid.windows(2) {
        let jump = (mse_closed_form(&p, w[1]) - mse_closed_form(&p, w[0])).abs();
        assert!(jump <= 1.01 * bound * step + 1e-15);
    }
}

#[test]
fn monte_carlo_agrees_with_closed_form() {
    let p = problem(2.0, 1.0);
    let mc = monte_carlo_mse(&p, 2.0, 100_000, 42).unwrap();
    assert!((mc.mse - mse_closed_form(&p, 2.0)).abs() <= 4.0 * mc.std_error);
    for e0 in [0.0, 0.7, 3.0] {
        let p = problem(e0, 1.0);
        let mc = monte_carlo_mse(&p, 0.0, 100_000, 8).unwrap();
        assert!((mc.mse - (0.5 + 0.25 * e0 * e0)).abs() <= 4.0 * mc.std_error, "e0 {e0}");
    }
}

#[test]
fn monte_carlo_is_deterministic_and_schedule_free() {
    let p = problem(1.0, 0.5);
    let a = monte_carlo_mse(&p, 0.4, 20_000, 3).unwrap();
    let b = monte_carlo_mse(&p, 0.4, 20_000, 3).unwrap();
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| monte_carlo_mse(&p, 0.4, 20_000, 3).unwrap());
    assert_eq!(a, c);
    assert_ne!(a, monte_carlo_mse(&p, 0.4, 20_000, 4).unwrap());
    assert!(monte_carlo_mse(&p, 0.4, 0, 3).is_err());
}

#[test]
fn invalid_problems_are_rejected() {
    assert!(GaussianProblem::new(1.0, 0.0, 1).is_err());
    assert!(GaussianProblem::new(1.0, 1.0, 0).is_err());
    assert!(GaussianProblem::new(-1.0, 1.0, 1).is_err());
    assert!(GaussianProblem::new(f64::NAN, 1.0, 1).is_err());
}
