//! The two-Gaussian-means instance of cross-learning.
//!
//! Two means `μ_x`, `μ_y` with known gap `|μ_x − μ_y| = ε₀` are estimated from
//! `M` samples each. The cross-learning estimator constrains the two estimates
//! to lie within `ε` of each other; it has a closed form ([`cl_estimate`]) and
//! an exactly computable mean squared error ([`mse_closed_form`]).
//!
//! Throughout, `σ_M = σ/√M` and the canonical instance is `μ_y = 0`,
//! `μ_x = ε₀` (the estimator commutes with translations).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Trials drawn from one RNG stream in [`monte_carlo_mse`].
pub const MONTE_CARLO_BLOCK: u64 = 4096;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianProblem {
    pub epsilon0: f64,
    pub sigma: f64,
    pub samples: u64,
}

impl GaussianProblem {
    pub fn new(epsilon0: f64, sigma: f64, samples: u64) -> Result<Self> {
        let p = GaussianProblem {
            epsilon0,
            sigma,
            samples,
        };
        p.validate()?;
        Ok(p)
    }

    /// Instance with `M = 1`, so that `σ_M = sigma_m`.
    pub fn with_sigma_m(epsilon0: f64, sigma_m: f64) -> Result<Self> {
        GaussianProblem::new(epsilon0, sigma_m, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.samples == 0 {
            return Err(Error::invalid("sample count M must be at least 1"));
        }
        if !(self.epsilon0 >= 0.0) || !self.epsilon0.is_finite() {
            return Err(Error::invalid(format!(
                "mean gap epsilon0 must be finite and nonnegative, got {}",
                self.epsilon0
            )));
        }
        Ok(())
    }

    pub fn sigma_m(&self) -> f64 {
        self.sigma / (self.samples as f64).sqrt()
    }

    /// MSE of the agnostic estimator `X̄_M`, i.e. `σ_M²`.
    pub fn agnostic_mse(&self) -> f64 {
        self.sigma_m().powi(2)
    }

    /// MSE at ε = 0, `σ_M²/2 + ε₀²/4`.
    pub fn consensus_mse(&self) -> f64 {
        self.agnostic_mse() / 2.0 + self.epsilon0.powi(2) / 4.0
    }
}

/// Standardized clip thresholds: `α = −(ε + ε₀)/(2σ_M)`, `β = (ε − ε₀)/(2σ_M)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaBeta {
    pub alpha: f64,
    pub beta: f64,
}

impl AlphaBeta {
    pub fn new(problem: &GaussianProblem, epsilon: f64) -> Self {
        let two_s = 2.0 * problem.sigma_m();
        AlphaBeta {
            alpha: -(epsilon + problem.epsilon0) / two_s,
            beta: (epsilon - problem.epsilon0) / two_s,
        }
    }
}

/// Closed-form minimizer of the two-mean least-squares fit subject to
/// `|μ̂_x − μ̂_y| ≤ ε`. At the tie `|x̄ − ȳ| = ε` the clipped branch is taken;
/// both branches agree there.
pub fn cl_estimate(xbar: f64, ybar: f64, epsilon: f64) -> (f64, f64) {
    let gap = xbar - ybar;
    if gap.abs() < epsilon {
        return (xbar, ybar);
    }
    let mid = 0.5 * (xbar + ybar);
    let half = 0.5 * epsilon;
    if gap > 0.0 {
        (mid + half, mid - half)
    } else {
        (mid - half, mid + half)
    }
}

/// Clip of the half-difference `w̄` to `[−ε/2, ε/2]`.
pub fn soft_threshold(wbar: f64, epsilon: f64) -> f64 {
    let half = 0.5 * epsilon;
    if wbar > half {
        half
    } else if wbar < -half {
        -half
    } else {
        wbar
    }
}

/// Exact MSE of `μ̂_x` as a function of ε.
///
/// ```text
/// mse(ε) = σ_M²/2 · [1 + (α e^{−α²} − β e^{−β²})/√π + (erf β − erf α)/2]
///        + σ_M²/2 · [α² (1 + erf α) + β² (1 − erf β)]
/// ```
///
/// `1 + erf α` and `1 − erf β` are evaluated as `erfc(−α)` and `erfc(β)`.
/// An infinite ε returns the limit `σ_M²`.
pub fn mse_closed_form(problem: &GaussianProblem, epsilon: f64) -> f64 {
    if epsilon == f64::INFINITY {
        return problem.agnostic_mse();
    }
    let AlphaBeta { alpha, beta } = AlphaBeta::new(problem, epsilon);
    let s2 = problem.sigma_m().powi(2);
    let gauss = (alpha * (-alpha * alpha).exp() - beta * (-beta * beta).exp()) * FRAC_1_SQRT_PI;
    let inner = 1.0 + gauss + 0.5 * (erf(beta) - erf(alpha));
    let tails = alpha * alpha * erfc(-alpha) + beta * beta * erfc(beta);
    0.5 * s2 * (inner + tails)
}

/// `f(x) = 1 + x e^{−x²}/√π − erf(x)/2 + x²(1 + erf x)` on `x ≤ 0`.
///
/// `mse_closed_form(ε = ε₀) = σ_M²/2 · f(−ε₀/σ_M)`, and `f` decreases from
/// `3/2` at `−∞` to `1` at `0`, which bounds that MSE by `3σ_M²/4`.
pub fn claim1_bracket(x: f64) -> Result<f64> {
    if !(x <= 0.0) {
        return Err(Error::invalid(format!("bracket function is defined on x <= 0, got {x}")));
    }
    // 1 − erf(x)/2 = 3/2 − erfc(−x)/2 keeps the small terms apart from 3/2
    Ok(1.5 + x * (-x * x).exp() * FRAC_1_SQRT_PI + (x * x - 0.5) * erfc(-x))
}

/// `d mse / dε = (σ_M/2)·[β(1 − erf β) − α(1 + erf α)]`.
///
/// At ε = 0 this is `(ε₀/2)·erf(−ε₀/(2σ_M))`, negative whenever ε₀ > 0.
pub fn mse_derivative(problem: &GaussianProblem, epsilon: f64) -> f64 {
    let AlphaBeta { alpha, beta } = AlphaBeta::new(problem, epsilon);
    0.5 * problem.sigma_m() * (beta * erfc(beta) - alpha * erfc(-alpha))
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`, 8 points.
const GL8: [(f64, f64); 4] = [
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_2, 0.101_228_536_290_376_3),
];

/// `mse(ε) − mse(0)` without the cancellation of subtracting two close
/// values. For `ε ≤ σ_M` the exact derivative is integrated by composite
/// Gauss–Legendre quadrature (the derivative varies on the scale `σ_M`, so
/// this is accurate to rounding); beyond that the difference is no longer
/// small relative to the MSE and is taken directly.
pub fn mse_change(problem: &GaussianProblem, epsilon: f64) -> f64 {
    let s = problem.sigma_m();
    if !(epsilon <= s) {
        return mse_closed_form(problem, epsilon) - mse_closed_form(problem, 0.0);
    }
    const PANELS: usize = 4;
    let width = epsilon / PANELS as f64;
    let mut total = 0.0;
    for k in 0..PANELS {
        let mid = width * (k as f64 + 0.5);
        let half = 0.5 * width;
        for &(x, w) in &GL8 {
            total += w * half * (mse_derivative(problem, mid - half * x) + mse_derivative(problem, mid + half * x));
        }
    }
    total
}

/// Smallest ε on the grid `ε₀·10^{j/4}`, `j = −40..=8`, where the MSE drops
/// below its consensus value. `None` when ε₀ = 0, where consensus is optimal.
pub fn claim2_witness(problem: &GaussianProblem) -> Option<f64> {
    (-40..=8)
        .map(|j| problem.epsilon0 * 10f64.powf(j as f64 / 4.0))
        .find(|&eps| eps > 0.0 && mse_change(problem, eps) < 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mse: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `E[(μ̂_x − μ_x)²]` over `trials` draws of the
/// sample means `X̄_M ~ N(ε₀, σ_M²)`, `Ȳ_M ~ N(0, σ_M²)`.
///
/// Trials are split into blocks of [`MONTE_CARLO_BLOCK`]; block `b` draws from
/// ChaCha8 stream `b` of `seed`, so the result does not depend on scheduling.
pub fn monte_carlo_mse(
    problem: &GaussianProblem,
    epsilon: f64,
    trials: u64,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    problem.validate()?;
    if trials == 0 {
        return Err(Error::invalid("Monte Carlo needs at least one trial"));
    }
    let s = problem.sigma_m();
    let mu_x = problem.epsilon0;
    let blocks = trials.div_ceil(MONTE_CARLO_BLOCK);

    let partials: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let n = MONTE_CARLO_BLOCK.min(trials - b * MONTE_CARLO_BLOCK);
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                let zx: f64 = StandardNormal.sample(&mut rng);
                let zy: f64 = StandardNormal.sample(&mut rng);
                let (est, _) = cl_estimate(mu_x + s * zx, s * zy, epsilon);
                let err2 = (est - mu_x).powi(2);
                sum += err2;
                sum_sq += err2 * err2;
            }
            (sum, sum_sq)
        })
        .collect();

    let (sum, sum_sq) = partials
        .iter()
        .fold((0.0, 0.0), |(a, b), (s1, s2)| (a + s1, b + s2));
    let n = trials as f64;
    let mean = sum / n;
    let var = if trials > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        mse: mean,
        std_error: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(epsilon0: f64) -> GaussianProblem {
        GaussianProblem::with_sigma_m(epsilon0, 1.0).unwrap()
    }

    #[test]
    fn estimate_cases() {
        assert_eq!(cl_estimate(1.0, 0.0, 2.0), (1.0, 0.0));
        assert_eq!(cl_estimate(2.0, 0.0, 1.0), (1.5, 0.5));
        assert_eq!(cl_estimate(0.0, 2.0, 1.0), (0.5, 1.5));
        // tie takes the clipped branch, which coincides with the raw means
        assert_eq!(cl_estimate(1.0, 0.0, 1.0), (1.0, 0.0));
        assert_eq!(cl_estimate(3.0, 3.0, 0.0), (3.0, 3.0));
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(0.3, 1.0), 0.3);
        assert_eq!(soft_threshold(5.0, 1.0), 0.5);
        assert_eq!(soft_threshold(-5.0, 1.0), -0.5);
    }

    #[test]
    fn closed_form_reference_values() {
        assert!((mse_closed_form(&unit(0.0), 0.0) - 0.5).abs() < 1e-15);
        assert!((mse_closed_form(&unit(2.0), 0.0) - 1.5).abs() < 1e-14);
        assert!((mse_closed_form(&unit(2.0), 1e3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn consensus_reduction_matches_formula() {
        for &e0 in &[0.0, 0.3, 1.0, 4.0] {
            for &s in &[0.1, 1.0, 7.0] {
                let p = GaussianProblem::with_sigma_m(e0, s).unwrap();
                let rel = (mse_closed_form(&p, 0.0) - p.consensus_mse()).abs() / p.consensus_mse();
                assert!(rel < 1e-13, "e0={e0} s={s} rel={rel}");
            }
        }
    }

    #[test]
    fn bracket_values() {
        assert_eq!(claim1_bracket(0.0).unwrap(), 1.0);
        assert!((claim1_bracket(-10.0).unwrap() - 1.5).abs() < 1e-6);
        let mid = claim1_bracket(-1.0).unwrap();
        assert!(mid > 1.0 && mid < 1.5);
        assert!(claim1_bracket(0.1).is_err());
        assert!(claim1_bracket(f64::NAN).is_err());
    }

    #[test]
    fn bracket_ties_mse_at_true_gap() {
        for &(e0, s) in &[(0.5, 1.0), (2.0, 1.0), (3.0, 0.2)] {
            let p = GaussianProblem::with_sigma_m(e0, s).unwrap();
            let via_bracket = 0.5 * s * s * claim1_bracket(-e0 / s).unwrap();
            assert!((mse_closed_form(&p, e0) - via_bracket).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_at_zero() {
        assert_eq!(mse_derivative(&unit(0.0), 0.0), 0.0);
        let d0 = mse_derivative(&unit(2.0), 0.0);
        // (ε₀/2)·erf(−ε₀/(2σ_M)) = −erf(1)
        assert!((d0 + 0.842_700_792_949_714_9).abs() < 1e-12);
        // the commonly quoted D(0) = (ε₀/σ_M)·erf(−ε₀/2σ_M) ≈ −1.6851 is twice this slope
        assert!((2.0 * d0 + 1.685_401_585_899_429_7).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_rejects_zero_trials_and_is_deterministic() {
        let p = unit(2.0);
        assert!(monte_carlo_mse(&p, 1.0, 0, 1).is_err());
        let a = monte_carlo_mse(&p, 1.0, 10_000, 42).unwrap();
        let b = monte_carlo_mse(&p, 1.0, 10_000, 42).unwrap();
        assert_eq!(a, b);
        let c = monte_carlo_mse(&p, 1.0, 10_000, 43).unwrap();
        assert_ne!(a.mse, c.mse);
    }

    #[test]
    fn invalid_problems() {
        assert!(GaussianProblem::new(1.0, 0.0, 1).is_err());
        assert!(GaussianProblem::new(1.0, 1.0, 0).is_err());
        assert!(GaussianProblem::new(-1.0, 1.0, 1).is_err());
        let p = GaussianProblem::new(1.0, 2.0, 4).unwrap();
        assert_eq!(p.sigma_m(), 1.0);
    }
}
