//! Euclidean projection onto the cross-learning feasible set
//!
//! ```text
//! minimize   Σ_i ‖θ_i − θ̄_i‖² + ‖θ_g − θ̄_g‖²
//! subject to ‖θ_i − θ_g‖² ≤ ε²,   i = 1..N
//! ```
//!
//! solved in the dual. With multipliers `μ_i ≥ 0` and `λ_i = μ_i/(1+μ_i)`,
//! `a = 1 + Σ λ_i`, the Lagrangian minimizers are
//!
//! ```text
//! θ_g = (θ̄_g + Σ_i λ_i θ̄_i) / a
//! θ_i = (1 − λ_i) θ̄_i + λ_i θ_g
//! ```
//!
//! and the dual gradient is `‖θ_i − θ_g‖² − ε²`. Expanding the norm, every
//! quantity the ascent needs is a function of the inner products among the
//! `θ̄` vectors, so after one `O(N² S)` Gram pass each iteration costs `O(N²)`
//! regardless of the parameter dimension `S`.
//!
//! The Gram matrix used by the loop is taken over `θ̄_k − θ̄_g` rather than
//! the raw vectors. The problem is translation invariant, and centering keeps
//! the expanded norms free of cancellation when parameters are large compared
//! to their spread.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{check_same_shape, dot, GramMatrix, ParamBundle, ParamVector};

/// Multiplier cap for ε = 0: beyond `λ > 1 − 1e−9` the consensus mean is returned.
pub const CONSENSUS_LAMBDA_CAP: f64 = 1.0 - 1e-9;

/// Largest `(N + 1)·S` accepted by [`brute_force_project`].
pub const BRUTE_FORCE_BUDGET: usize = 256;

const ARMIJO: f64 = 1e-4;

/// How the multiplier step is chosen at each dual iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// Newton direction on the multipliers that are not pinned at zero,
    /// with the step length found by Armijo backtracking along the projection
    /// arc. The dual Hessian is assembled from the Gram matrix.
    ProjectedNewton,
    /// `α_k = α₀/(k + 1)`; `α₀` defaults to `1/(1 + max diag Gram)`.
    Harmonic { alpha0: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionSettings {
    /// Threshold on `|⟨∂_μ L, μ⟩|`. `None` resolves to `1e−12·(1 + Σ_i ‖θ̄_i − θ̄_g‖²)`.
    pub delta: Option<f64>,
    pub step: StepRule,
    pub max_iters: usize,
    /// Warm-start multipliers; zeros when absent.
    pub mu_init: Option<Vec<f64>>,
    /// Accepted constraint slack, relative to ε.
    pub feasibility_rel_tol: f64,
    /// Absolute slack added to the relative one (the only slack at ε = 0).
    pub feasibility_abs_tol: f64,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        ProjectionSettings {
            delta: None,
            step: StepRule::ProjectedNewton,
            max_iters: 10_000,
            mu_init: None,
            feasibility_rel_tol: 1e-10,
            feasibility_abs_tol: 1e-12,
        }
    }
}

impl ProjectionSettings {
    pub fn with_warm_start(mut self, mu: Vec<f64>) -> Self {
        self.mu_init = Some(mu);
        self
    }

    /// Stopping threshold δ for a dual problem on `gram`.
    pub fn resolved_delta(&self, gram: &GramMatrix) -> f64 {
        self.delta.unwrap_or_else(|| {
            let spread: f64 = (1..gram.order()).map(|i| gram.get(i, i)).sum();
            1e-12 * (1.0 + spread)
        })
    }

    /// Largest admissible `‖θ_i − θ_g‖² − ε²` at radius `epsilon`.
    pub fn squared_slack(&self, epsilon: f64) -> f64 {
        let reach = epsilon + self.feasibility_rel_tol * epsilon + self.feasibility_abs_tol;
        reach * reach - epsilon * epsilon
    }
}

/// Dual iterate with its derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    mu: Vec<f64>,
    lambda: Vec<f64>,
    a: f64,
    gram: GramMatrix,
}

impl DualState {
    pub fn new(mu: Vec<f64>, gram: GramMatrix) -> Result<Self> {
        if mu.len() != gram.num_tasks() {
            return Err(Error::DimensionMismatch {
                context: "multipliers vs Gram matrix",
                expected: gram.num_tasks(),
                found: mu.len(),
            });
        }
        if mu.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::invalid("multipliers must be nonnegative"));
        }
        let lambda: Vec<f64> = mu.iter().map(|&m| lambda_of(m)).collect();
        let a = 1.0 + lambda.iter().sum::<f64>();
        Ok(DualState { mu, lambda, a, gram })
    }

    /// State for `bundle` with the centered Gram matrix the projection uses.
    pub fn for_bundle(mu: Vec<f64>, bundle: &ParamBundle) -> Result<Self> {
        DualState::new(mu, centered_gram(bundle))
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `a = |[1, λ_1, …, λ_N]|₁`.
    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }
}

fn lambda_of(mu: f64) -> f64 {
    if mu.is_infinite() {
        1.0
    } else {
        mu / (1.0 + mu)
    }
}

/// Gram matrix of `θ̄_k − θ̄_g`, `k = 0..=N` (row and column 0 are zero).
pub fn centered_gram(bundle: &ParamBundle) -> GramMatrix {
    let n = bundle.num_tasks();
    let center = bundle.central().as_slice();
    let diffs: Vec<Vec<f64>> = bundle
        .tasks()
        .iter()
        .map(|t| t.as_slice().iter().zip(center).map(|(x, c)| x - c).collect())
        .collect();
    let mut rows = vec![vec![0.0; n + 1]; n + 1];
    for i in 0..n {
        for j in i..n {
            let v = dot(&diffs[i], &diffs[j]);
            rows[i + 1][j + 1] = v;
            rows[j + 1][i + 1] = v;
        }
    }
    GramMatrix::from_rows(rows).expect("square by construction")
}

/// Everything the ascent needs at one multiplier vector, from the Gram matrix only.
struct DualPoint {
    mu: Vec<f64>,
    lambda: Vec<f64>,
    a: f64,
    /// `‖θ̄_k − θ_g‖²` for `k = 0..=N`.
    resid_sq: Vec<f64>,
    gw: Vec<f64>,
    wgw: f64,
    grad: Vec<f64>,
    value: f64,
}

impl DualPoint {
    fn at(gram: &GramMatrix, mu: Vec<f64>, eps_sq: f64) -> Self {
        let n = gram.num_tasks();
        let lambda: Vec<f64> = mu.iter().map(|&m| lambda_of(m)).collect();
        let a = 1.0 + lambda.iter().sum::<f64>();

        // θ_g = Σ_k w_k θ̄_k
        let mut w = Vec::with_capacity(n + 1);
        w.push(1.0 / a);
        w.extend(lambda.iter().map(|l| l / a));

        let gw: Vec<f64> = (0..=n)
            .map(|k| gram.row(k).iter().zip(&w).map(|(g, wk)| g * wk).sum())
            .collect();
        let wgw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        let resid_sq: Vec<f64> = (0..=n)
            .map(|k| (gram.get(k, k) - 2.0 * gw[k] + wgw).max(0.0))
            .collect();

        let mut grad = Vec::with_capacity(n);
        let mut value = resid_sq[0];
        for i in 0..n {
            let l = lambda[i];
            let r = resid_sq[i + 1];
            let g = (1.0 - l) * (1.0 - l) * r - eps_sq;
            grad.push(g);
            value += l * l * r;
            if mu[i] > 0.0 {
                value += mu[i] * g;
            }
        }
        DualPoint {
            mu,
            lambda,
            a,
            resid_sq,
            gw,
            wgw,
            grad,
            value,
        }
    }

    fn gap(&self) -> f64 {
        self.grad
            .iter()
            .zip(&self.mu)
            .map(|(g, m)| g * m)
            .sum::<f64>()
            .abs()
    }

    fn max_grad(&self) -> f64 {
        self.grad.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Negated dual Hessian restricted to `free`, a positive semidefinite matrix.
    ///
    /// With `r_k = θ̄_k − θ_g`, `∂g_i/∂λ_j = −2δ_ij(1−λ_i)‖r_i‖² − 2(1−λ_i)² r_iᵀr_j / a`
    /// and `dλ_j/dμ_j = (1−λ_j)²`.
    fn neg_hessian(&self, gram: &GramMatrix, free: &[usize]) -> Vec<f64> {
        let m = free.len();
        let mut h = vec![0.0; m * m];
        for (p, &i) in free.iter().enumerate() {
            let ci = 1.0 - self.lambda[i];
            for (q, &j) in free.iter().enumerate().skip(p) {
                let cj = 1.0 - self.lambda[j];
                let cross = gram.get(i + 1, j + 1) - self.gw[i + 1] - self.gw[j + 1] + self.wgw;
                let mut v = 2.0 * ci * ci * cj * cj * cross / self.a;
                if i == j {
                    v += 2.0 * ci * ci * ci * self.resid_sq[i + 1];
                }
                h[p * m + q] = v;
                h[q * m + p] = v;
            }
        }
        h
    }
}

/// Solves `A x = b` for symmetric positive semidefinite `A` by Cholesky,
/// adding a diagonal shift relative to `A`'s largest diagonal entry if `A` is
/// numerically singular.
fn solve_spd(a: &[f64], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let max_diag = (0..m).map(|i| a[i * m + i]).fold(0.0, f64::max);
    let floor = (1e-12 * max_diag).max(f64::MIN_POSITIVE);
    let mut shift = 0.0;
    loop {
        let mut l = vec![0.0; m * m];
        let mut ok = true;
        'outer: for i in 0..m {
            for j in 0..=i {
                let mut sum = a[i * m + j] + if i == j { shift } else { 0.0 };
                for k in 0..j {
                    sum -= l[i * m + k] * l[j * m + k];
                }
                if i == j {
                    if !(sum > 0.0) {
                        ok = false;
                        break 'outer;
                    }
                    l[i * m + i] = sum.sqrt();
                } else {
                    l[i * m + j] = sum / l[j * m + j];
                }
            }
        }
        if ok {
            let mut y = vec![0.0; m];
            for i in 0..m {
                let s: f64 = (0..i).map(|k| l[i * m + k] * y[k]).sum();
                y[i] = (b[i] - s) / l[i * m + i];
            }
            let mut x = vec![0.0; m];
            for i in (0..m).rev() {
                let s: f64 = (i + 1..m).map(|k| l[k * m + i] * x[k]).sum();
                x[i] = (y[i] - s) / l[i * m + i];
            }
            return x;
        }
        shift = if shift == 0.0 { floor } else { shift * 10.0 };
    }
}

/// `∂L/∂μ_i = ‖θ_i − θ_g‖² − ε²` at the Lagrangian minimizers, evaluated from
/// the state's Gram matrix alone.
pub fn dual_subgradient(state: &DualState, epsilon: f64) -> Vec<f64> {
    DualPoint::at(&state.gram, state.mu.clone(), epsilon * epsilon).grad
}

/// Lagrangian minimizers for the multipliers in `state`.
pub fn primal_recover(state: &DualState, input: &ParamBundle) -> Result<ParamBundle> {
    if state.mu.len() != input.num_tasks() {
        return Err(Error::DimensionMismatch {
            context: "multipliers vs task count",
            expected: input.num_tasks(),
            found: state.mu.len(),
        });
    }
    Ok(recover(&state.lambda, state.a, input))
}

fn recover(lambda: &[f64], a: f64, input: &ParamBundle) -> ParamBundle {
    let s = input.dim();
    let center = input.central().as_slice();
    // θ_g = θ̄_g + Σ_i (λ_i/a)(θ̄_i − θ̄_g)
    let mut central = center.to_vec();
    for (t, &l) in input.tasks().iter().zip(lambda) {
        if l == 0.0 {
            continue;
        }
        let w = l / a;
        for j in 0..s {
            central[j] += w * (t[j] - center[j]);
        }
    }
    let tasks = input
        .tasks()
        .iter()
        .zip(lambda)
        .map(|(t, &l)| {
            if l == 0.0 {
                return t.clone();
            }
            let v = t
                .as_slice()
                .iter()
                .zip(&central)
                .map(|(ti, gi)| ti + l * (gi - ti))
                .collect();
            ParamVector::from_raw(v)
        })
        .collect();
    ParamBundle::new(tasks, ParamVector::from_raw(central)).expect("shape preserved")
}

fn consensus_of(input: &ParamBundle) -> ParamBundle {
    let n = input.num_tasks() + 1;
    let center = input.central().as_slice();
    let mut mean = center.to_vec();
    for t in input.tasks() {
        for (m, (x, c)) in mean.iter_mut().zip(t.as_slice().iter().zip(center)) {
            *m += (x - c) / n as f64;
        }
    }
    let v = ParamVector::from_raw(mean);
    ParamBundle::replicated(&v, input.num_tasks()).expect("nonempty")
}

/// Result of the multiplier ascent on a Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutcome {
    pub mu: Vec<f64>,
    pub iterations: usize,
    /// `|⟨∂_μ L, μ⟩|` at the returned multipliers.
    pub gap: f64,
    /// Largest `‖θ_i − θ_g‖² − ε²` at the returned multipliers.
    pub max_violation_sq: f64,
    pub converged: bool,
    /// Set when ε = 0 drove a multiplier past [`CONSENSUS_LAMBDA_CAP`].
    pub consensus: bool,
}

/// Projected dual ascent `μ ← [μ + step·∂_μ L]₊` on a precomputed Gram matrix.
///
/// Stops once `|⟨∂_μ L, μ⟩| ≤ δ` and every constraint holds within the
/// configured slack. No vector of the parameter dimension is touched.
pub fn dual_ascent(gram: &GramMatrix, epsilon: f64, settings: &ProjectionSettings) -> Result<DualOutcome> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!(
            "projection radius must be finite and nonnegative, got {epsilon}"
        )));
    }
    let n = gram.num_tasks();
    let mu0 = match &settings.mu_init {
        Some(m) if m.len() == n => m.iter().map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 }).collect(),
        Some(m) => {
            return Err(Error::DimensionMismatch {
                context: "warm-start multipliers",
                expected: n,
                found: m.len(),
            })
        }
        None => vec![0.0; n],
    };
    let eps_sq = epsilon * epsilon;
    let delta = settings.resolved_delta(gram);
    let slack = settings.squared_slack(epsilon);
    let alpha0 = match settings.step {
        StepRule::Harmonic { alpha0 } => alpha0.unwrap_or(1.0 / (1.0 + gram.max_diagonal())),
        StepRule::ProjectedNewton => 0.0,
    };

    let mut point = DualPoint::at(gram, mu0, eps_sq);
    let mut iterations = 0;
    let mut consensus = false;
    let mut converged = false;
    loop {
        if point.gap() <= delta && point.max_grad() <= slack {
            converged = true;
            break;
        }
        if epsilon == 0.0 && point.lambda.iter().any(|&l| l > CONSENSUS_LAMBDA_CAP) {
            consensus = true;
            converged = true;
            break;
        }
        if iterations >= settings.max_iters {
            break;
        }
        point = match settings.step {
            StepRule::Harmonic { .. } => {
                let step = alpha0 / (iterations as f64 + 1.0);
                let mu = point
                    .mu
                    .iter()
                    .zip(&point.grad)
                    .map(|(m, g)| (m + step * g).max(0.0))
                    .collect();
                DualPoint::at(gram, mu, eps_sq)
            }
            StepRule::ProjectedNewton => newton_step(gram, &point, eps_sq),
        };
        iterations += 1;
    }

    Ok(DualOutcome {
        gap: point.gap(),
        max_violation_sq: point.max_grad().max(0.0),
        mu: point.mu,
        iterations,
        converged,
        consensus,
    })
}

fn newton_step(gram: &GramMatrix, point: &DualPoint, eps_sq: f64) -> DualPoint {
    let n = point.mu.len();
    // multipliers at zero with a descent-pointing gradient stay put
    let free: Vec<usize> = (0..n)
        .filter(|&i| point.mu[i] > 0.0 || point.grad[i] > 0.0)
        .collect();
    let mut direction = vec![0.0; n];
    if !free.is_empty() {
        let h = point.neg_hessian(gram, &free);
        let g: Vec<f64> = free.iter().map(|&i| point.grad[i]).collect();
        let d = solve_spd(&h, &g);
        for (&i, di) in free.iter().zip(d) {
            direction[i] = di;
        }
    }
    let mut t = 1.0;
    loop {
        let mu: Vec<f64> = point
            .mu
            .iter()
            .zip(&direction)
            .map(|(m, d)| (m + t * d).max(0.0))
            .collect();
        let ascent: f64 = mu
            .iter()
            .zip(&point.mu)
            .zip(&point.grad)
            .map(|((new, old), g)| g * (new - old))
            .sum();
        let candidate = DualPoint::at(gram, mu, eps_sq);
        let noise = 1e-15 * (1.0 + point.value.abs());
        if candidate.value >= point.value + ARMIJO * ascent - noise || t < 1e-12 {
            return candidate;
        }
        t *= 0.5;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOutcome {
    pub output: ParamBundle,
    pub state: DualState,
    pub iterations: usize,
    pub gap: f64,
    /// False when `max_iters` ran out; `output` is still the best recovery.
    pub converged: bool,
}

/// Projects `input` onto `{‖θ_i − θ_g‖ ≤ ε ∀i}`.
///
/// ```
/// use crosslearn::params::ParamBundle;
/// use crosslearn::projection::{project, ProjectionSettings};
///
/// let input = ParamBundle::from_slices(&[&[2.0]], &[0.0]).unwrap();
/// let out = project(&input, 1.0, &ProjectionSettings::default()).unwrap();
/// assert!((out.output.task(0)[0] - 1.5).abs() < 1e-6);
/// assert!((out.output.central()[0] - 0.5).abs() < 1e-6);
/// ```
pub fn project(input: &ParamBundle, epsilon: f64, settings: &ProjectionSettings) -> Result<ProjectionOutcome> {
    if epsilon.is_infinite() {
        return Err(Error::invalid(
            "projection with an infinite radius is the identity; skip it instead",
        ));
    }
    let gram = centered_gram(input);
    let dual = dual_ascent(&gram, epsilon, settings)?;
    if !dual.converged {
        log::warn!(
            "dual projection stopped after {} iterations with gap {:.3e}",
            dual.iterations,
            dual.gap
        );
    }
    let state = DualState::new(dual.mu, gram)?;
    let output = if dual.consensus {
        consensus_of(input)
    } else {
        recover(&state.lambda, state.a, input)
    };
    Ok(ProjectionOutcome {
        output,
        state,
        iterations: dual.iterations,
        gap: dual.gap,
        converged: dual.converged,
    })
}

/// Reference projection by Dykstra's cyclic projections onto the individual
/// sets `{‖θ_i − θ_g‖ ≤ ε}`, each of which has an exact closed-form projection.
/// Works on the primal variables directly and shares no code with the dual path.
pub fn brute_force_project(input: &ParamBundle, epsilon: f64) -> Result<ParamBundle> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!(
            "projection radius must be finite and nonnegative, got {epsilon}"
        )));
    }
    let n = input.num_tasks();
    let s = input.dim();
    let size = (n + 1) * s;
    if size > BRUTE_FORCE_BUDGET {
        return Err(Error::BudgetExceeded {
            size,
            budget: BRUTE_FORCE_BUDGET,
        });
    }
    let mut tasks: Vec<Vec<f64>> = input.tasks().iter().map(|t| t.as_slice().to_vec()).collect();
    let mut central = input.central().as_slice().to_vec();
    // Dykstra correction terms per set, on the (θ_i, θ_g) coordinates it touches.
    let mut corr_task = vec![vec![0.0; s]; n];
    let mut corr_central = vec![vec![0.0; s]; n];

    let scale = 1.0 + (0..=n).map(|k| input.gram_vector(k).norm()).fold(0.0, f64::max);
    let tol = 1e-15 * scale;
    let mut u = vec![0.0; s];
    let mut v = vec![0.0; s];
    for _ in 0..2_000_000 {
        let mut change = 0.0f64;
        for i in 0..n {
            for j in 0..s {
                u[j] = tasks[i][j] + corr_task[i][j];
                v[j] = central[j] + corr_central[i][j];
            }
            let dist = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            for j in 0..s {
                let (pu, pv) = if dist <= epsilon {
                    (u[j], v[j])
                } else {
                    let mid = 0.5 * (u[j] + v[j]);
                    let half = 0.5 * (u[j] - v[j]) * epsilon / dist;
                    (mid + half, mid - half)
                };
                corr_task[i][j] = u[j] - pu;
                corr_central[i][j] = v[j] - pv;
                change = change.max((tasks[i][j] - pu).abs()).max((central[j] - pv).abs());
                tasks[i][j] = pu;
                central[j] = pv;
            }
        }
        if change <= tol {
            break;
        }
    }
    let tasks = tasks.into_iter().map(ParamVector::new).collect::<Result<Vec<_>>>()?;
    ParamBundle::new(tasks, ParamVector::new(central)?)
}

/// Projection objective `Σ_i ‖θ_i − θ̄_i‖² + ‖θ_g − θ̄_g‖²`.
pub fn projection_objective(output: &ParamBundle, input: &ParamBundle) -> Result<f64> {
    check_same_shape(output, input)?;
    output.squared_distance(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::feasibility;
    use crate::params::Centrality;

    fn scalar_instance() -> ParamBundle {
        ParamBundle::from_slices(&[&[2.0]], &[0.0]).unwrap()
    }

    #[test]
    fn recover_with_zero_multipliers_is_identity() {
        let b = ParamBundle::from_slices(&[&[1.0, 2.0], &[-3.0, 0.5]], &[0.25, 0.0]).unwrap();
        let state = DualState::for_bundle(vec![0.0, 0.0], &b).unwrap();
        assert_eq!(primal_recover(&state, &b).unwrap(), b);
    }

    #[test]
    fn recover_hand_kkt_instance() {
        let b = scalar_instance();
        let state = DualState::for_bundle(vec![0.5], &b).unwrap();
        assert!((state.lambda()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((state.a() - 4.0 / 3.0).abs() < 1e-15);
        let out = primal_recover(&state, &b).unwrap();
        assert!((out.central()[0] - 0.5).abs() < 1e-15);
        assert!((out.task(0)[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn recover_large_multipliers_tends_to_consensus() {
        let b = ParamBundle::from_slices(&[&[3.0], &[6.0]], &[0.0]).unwrap();
        let state = DualState::for_bundle(vec![1e12, 1e12], &b).unwrap();
        let out = primal_recover(&state, &b).unwrap();
        for k in 0..=2 {
            assert!((out.gram_vector(k)[0] - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn subgradient_zero_distances() {
        let b = ParamBundle::from_slices(&[&[1.0, 1.0], &[1.0, 1.0]], &[1.0, 1.0]).unwrap();
        let state = DualState::for_bundle(vec![0.3, 7.0], &b).unwrap();
        assert_eq!(dual_subgradient(&state, 0.5), vec![-0.25, -0.25]);
    }

    #[test]
    fn subgradient_at_zero_multiplier() {
        let state = DualState::for_bundle(vec![0.0], &scalar_instance()).unwrap();
        assert_eq!(dual_subgradient(&state, 1.0), vec![3.0]);
    }

    #[test]
    fn project_feasible_input_is_fixed_point() {
        let b = ParamBundle::from_slices(&[&[0.1, 0.2], &[-0.3, 0.0]], &[0.0, 0.0]).unwrap();
        let out = project(&b, 1.0, &ProjectionSettings::default()).unwrap();
        assert_eq!(out.output, b);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.gap, 0.0);
        assert!(out.state.mu().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn project_scalar_instance() {
        let out = project(&scalar_instance(), 1.0, &ProjectionSettings::default()).unwrap();
        assert!(out.converged);
        assert!((out.output.task(0)[0] - 1.5).abs() < 1e-4);
        assert!((out.output.central()[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn project_harmonic_rule_on_easy_instance() {
        let settings = ProjectionSettings {
            step: StepRule::Harmonic { alpha0: Some(0.5) },
            max_iters: 200_000,
            delta: Some(1e-4),
            ..Default::default()
        };
        let out = project(&scalar_instance(), 1.0, &settings).unwrap();
        assert!(out.converged, "gap {}", out.gap);
        assert!((out.output.task(0)[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn project_zero_radius_is_consensus_mean() {
        let b = ParamBundle::from_slices(&[&[3.0, 1.0], &[6.0, -2.0]], &[0.0, 4.0]).unwrap();
        let out = project(&b, 0.0, &ProjectionSettings::default()).unwrap();
        for k in 0..=2 {
            assert!((out.output.gram_vector(k)[0] - 3.0).abs() < 1e-8);
            assert!((out.output.gram_vector(k)[1] - 1.0).abs() < 1e-8);
        }
        assert!(out.output.max_deviation() <= 1e-8);
    }

    #[test]
    fn project_rejects_bad_radius() {
        let b = scalar_instance();
        assert!(project(&b, f64::INFINITY, &ProjectionSettings::default()).is_err());
        assert!(project(&b, -1.0, &ProjectionSettings::default()).is_err());
        assert!(project(&b, f64::NAN, &ProjectionSettings::default()).is_err());
    }

    #[test]
    fn non_convergence_still_returns_output() {
        let settings = ProjectionSettings {
            step: StepRule::Harmonic { alpha0: Some(1e-6) },
            max_iters: 5,
            ..Default::default()
        };
        let out = project(&scalar_instance(), 1.0, &settings).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 5);
        assert!(out.gap.is_finite());
    }

    #[test]
    fn warm_start_dimension_checked() {
        let settings = ProjectionSettings::default().with_warm_start(vec![0.0, 1.0]);
        assert!(project(&scalar_instance(), 1.0, &settings).is_err());
        let settings = ProjectionSettings::default().with_warm_start(vec![0.5]);
        let out = project(&scalar_instance(), 1.0, &settings).unwrap();
        assert!(out.iterations <= 1);
    }

    #[test]
    fn brute_force_reference_cases() {
        let b = ParamBundle::from_slices(&[&[0.1], &[-0.2]], &[0.0]).unwrap();
        assert_eq!(brute_force_project(&b, 1.0).unwrap(), b);
        let out = brute_force_project(&scalar_instance(), 1.0).unwrap();
        assert!((out.task(0)[0] - 1.5).abs() < 1e-12);
        assert!((out.central()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn brute_force_budget() {
        let big = ParamVector::zeros(100);
        let b = ParamBundle::replicated(&big, 3).unwrap();
        assert!(matches!(
            brute_force_project(&b, 1.0),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn large_offset_does_not_break_feasibility() {
        // parameters far from the origin, spread much smaller than magnitude
        let b = ParamBundle::from_slices(
            &[&[1e4 + 1e-3, 1e4], &[1e4 - 2e-3, 1e4 + 1e-3]],
            &[1e4, 1e4],
        )
        .unwrap();
        let eps = 1e-4;
        let out = project(&b, eps, &ProjectionSettings::default()).unwrap();
        assert!(out.converged);
        let f = feasibility(&out.output, Centrality::Finite(eps));
        assert!(f.worst_violation <= 1e-6 * eps, "violation {}", f.worst_violation);
    }
}
