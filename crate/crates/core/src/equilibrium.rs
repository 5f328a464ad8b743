//! Closed-form engine for deterministic coefficients.
//!
//! With deterministic `r` and `θ` the martingale part of the BSDE vanishes and
//! `M` solves the linear ODE `−M' = 2 r M + μ₁ ρ |Proj_K θ|²`, `M_T = 1`.
//! Because the coefficients are constant on each cell, `M` has a closed form
//! inside every cell and all functionals below are evaluated without
//! time-stepping error:
//!
//! * `∫ c'θ ds = ln(M_a / M_b) − 2 ∫_a^b r` follows from `(ln M)'`;
//! * `∫ |c|² ds` is integrated per cell with a 16-point Gauss–Legendre rule on
//!   the closed-form integrand.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cone::ConeSpec;
use crate::market::{DeterministicCoefficients, Objective, TimeGrid};
use crate::math::{dot, exp, expm1, growth_integral, ln, norm_sq, GaussLegendre};
use crate::{Error, Result};

const GL_POINTS: usize = 16;
/// Relative tolerance for equality-of-values comparisons.
pub const VALUE_RTOL: f64 = 1e-9;

/// Feedback `u_t = c_t X_t + g_t`, piecewise constant on the cells of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeedbackPolicy {
    grid: TimeGrid,
    slope: Vec<Vec<f64>>,
    intercept: Option<Vec<Vec<f64>>>,
}

impl LinearFeedbackPolicy {
    pub fn new(grid: TimeGrid, slope: Vec<Vec<f64>>, intercept: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let n = grid.n_steps();
        if slope.len() != n {
            return Err(Error::GridMismatch(format!("{} slope cells for {n} grid cells", slope.len())));
        }
        let dim = slope[0].len();
        if dim == 0 {
            return Err(Error::invalid("slope", "must have at least one component"));
        }
        for cell in slope.iter().chain(intercept.iter().flatten()) {
            if cell.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: cell.len() });
            }
            if cell.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("policy", "entries must be finite"));
            }
        }
        if let Some(g) = &intercept {
            if g.len() != n {
                return Err(Error::GridMismatch(format!("{} intercept cells for {n} grid cells", g.len())));
            }
        }
        Ok(Self { grid, slope, intercept })
    }

    /// The cash-only policy.
    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        Self { grid, slope: vec![vec![0.0; dim]; grid.n_steps()], intercept: None }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.slope[0].len()
    }

    pub fn slope(&self, cell: usize) -> &[f64] {
        &self.slope[cell.min(self.slope.len() - 1)]
    }

    pub fn slopes(&self) -> &[Vec<f64>] {
        &self.slope
    }

    pub fn intercept(&self, cell: usize) -> Option<&[f64]> {
        self.intercept.as_ref().map(|g| g[cell.min(g.len() - 1)].as_slice())
    }

    pub fn is_affine(&self) -> bool {
        self.intercept.is_some()
    }
}

/// Mean, variance and objective value of terminal wealth under a strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyValue {
    pub mean_t: f64,
    pub var_t: f64,
    /// `½ Var(X_T) − μ₁ x₀ E[X_T]`.
    pub j0: f64,
}

impl PolicyValue {
    fn from_moments(mean_t: f64, var_t: f64, objective: &Objective) -> Self {
        Self { mean_t, var_t, j0: 0.5 * var_t - objective.mu1 * objective.x0 * mean_t }
    }
}

/// The equilibrium of the deterministic-coefficient problem.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    /// `M` at the grid nodes; `M_T = 1`.
    pub m: Vec<f64>,
    /// `ρ` at the grid nodes.
    pub rho: Vec<f64>,
    /// Feedback coefficient `c_t = μ₁ ρ_t Proj_K(θ_t) / M_t` at the nodes.
    pub node_feedback: Vec<Vec<f64>>,
    /// Cell-averaged feedback, used for simulation on the grid.
    pub policy: LinearFeedbackPolicy,
    /// `∫_0^T c_s'θ_s ds`.
    pub int_c_theta: f64,
    /// `∫_0^T |c_s|² ds`.
    pub int_c_sq: f64,
    pub value: PolicyValue,
}

/// Per-cell closed form of `M` and `ρ` for the deterministic case.
struct CellModel<'a> {
    coeffs: &'a DeterministicCoefficients,
    mu1: f64,
    /// `|Proj_K θ|²` per cell.
    p: Vec<f64>,
    m: Vec<f64>,
}

impl<'a> CellModel<'a> {
    fn new(coeffs: &'a DeterministicCoefficients, cone: &ConeSpec, mu1: f64) -> Result<Self> {
        check_dims(coeffs, cone)?;
        let n = coeffs.grid().n_steps();
        let dt = coeffs.grid().dt();
        let p: Vec<f64> = coeffs.projected_premium(cone)?.iter().map(|v| norm_sq(v)).collect();
        let mut m = vec![1.0; n + 1];
        for i in (0..n).rev() {
            let r = coeffs.rate()[i];
            let rho_b = coeffs.rho_node(i + 1);
            m[i] = exp(2.0 * r * dt) * m[i + 1] + mu1 * p[i] * rho_b * exp(r * dt) * growth_integral(r, dt);
        }
        Ok(Self { coeffs, mu1, p, m })
    }

    /// `(M_s, ρ_s)` for `s` in cell `i`, written with `τ = t_{i+1} − s`.
    fn at(&self, i: usize, tau: f64) -> (f64, f64) {
        let r = self.coeffs.rate()[i];
        let rho_b = self.coeffs.rho_node(i + 1);
        let m = exp(2.0 * r * tau) * self.m[i + 1] + self.mu1 * self.p[i] * rho_b * exp(r * tau) * growth_integral(r, tau);
        (m, rho_b * exp(r * tau))
    }

    /// `μ₁ ρ_s / M_s`, the scalar multiplying `Proj_K θ` in the feedback.
    fn gain(&self, i: usize, tau: f64) -> f64 {
        let (m, rho) = self.at(i, tau);
        self.mu1 * rho / m
    }
}

fn check_dims(coeffs: &DeterministicCoefficients, cone: &ConeSpec) -> Result<()> {
    if coeffs.dim() != cone.dim() {
        return Err(Error::DimensionMismatch { expected: cone.dim(), found: coeffs.dim() });
    }
    Ok(())
}

/// `M_s = e^{2∫_s^T r}(1 + μ₁ ∫_s^T e^{−∫_v^T r} |Proj_K θ_v|² dv)` at every node.
pub fn compute_m(coeffs: &DeterministicCoefficients, cone: &ConeSpec, mu1: f64) -> Result<Vec<f64>> {
    Ok(CellModel::new(coeffs, cone, mu1)?.m)
}

/// The equilibrium feedback `c_s = μ₁ ρ_s Proj_K(θ_s) / M_s`, averaged over
/// each grid cell.
pub fn equilibrium_policy(coeffs: &DeterministicCoefficients, cone: &ConeSpec, mu1: f64) -> Result<LinearFeedbackPolicy> {
    let objective = Objective { mu1, mu2: 0.0, x0: 1.0 };
    Ok(solve_equilibrium(coeffs, cone, &objective)?.policy)
}

/// Equilibrium feedback, its exact integrals and the value `J(0, x₀; u*)`.
pub fn solve_equilibrium(coeffs: &DeterministicCoefficients, cone: &ConeSpec, objective: &Objective) -> Result<EquilibriumSolution> {
    let model = CellModel::new(coeffs, cone, objective.mu1)?;
    let grid = *coeffs.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let proj = coeffs.projected_premium(cone)?;
    let rule = GaussLegendre::new(GL_POINTS);

    let rho: Vec<f64> = (0..=n).map(|i| coeffs.rho_node(i)).collect();
    let node_feedback: Vec<Vec<f64>> = (0..=n)
        .map(|i| {
            let g = objective.mu1 * rho[i] / model.m[i];
            proj[i.min(n - 1)].iter().map(|x| g * x).collect()
        })
        .collect();

    let mut slope = Vec::with_capacity(n);
    let mut int_c_sq = 0.0;
    for (i, pr) in proj.iter().enumerate() {
        let p = model.p[i];
        if p == 0.0 || objective.mu1 == 0.0 {
            slope.push(vec![0.0; pr.len()]);
            continue;
        }
        // p ∫ gain = ∫ c'θ = ln(M_a/M_b) − 2 r Δ over the cell.
        let int_gain = (ln(model.m[i] / model.m[i + 1]) - 2.0 * coeffs.rate()[i] * dt) / p;
        let avg = int_gain / dt;
        slope.push(pr.iter().map(|x| avg * x).collect());
        int_c_sq += p * rule.integrate(0.0, dt, |tau| {
            let g = model.gain(i, tau);
            g * g
        });
    }
    let int_r = coeffs.rate_between(0, n);
    let int_c_theta = ln(model.m[0]) - 2.0 * int_r;
    let mean_t = objective.x0 * exp(int_r + int_c_theta);
    let var_t = mean_t * mean_t * expm1(int_c_sq);
    Ok(EquilibriumSolution {
        policy: LinearFeedbackPolicy::new(grid, slope, None)?,
        m: model.m,
        rho,
        node_feedback,
        int_c_theta,
        int_c_sq,
        value: PolicyValue::from_moments(mean_t, var_t, objective),
    })
}

/// Exact terminal moments of `X` under a pure linear feedback `u = c X`
/// with piecewise-constant `c`:
/// `E[X_T] = x₀ e^{∫(r + c'θ)}` and `E[X_T²] = x₀² e^{∫(2r + 2c'θ + |c|²)}`.
pub fn evaluate_linear_feedback(coeffs: &DeterministicCoefficients, policy: &LinearFeedbackPolicy, objective: &Objective) -> Result<PolicyValue> {
    check_policy(coeffs, policy)?;
    if policy.is_affine() {
        return Err(Error::invalid("policy", "closed-form evaluation needs a pure linear feedback (no intercept)"));
    }
    let dt = coeffs.grid().dt();
    let mut drift = 0.0;
    let mut quad = 0.0;
    for (i, c) in policy.slopes().iter().enumerate() {
        drift += (coeffs.rate()[i] + dot(c, &coeffs.theta()[i])) * dt;
        quad += norm_sq(c) * dt;
    }
    let mean_t = objective.x0 * exp(drift);
    let var_t = mean_t * mean_t * expm1(quad);
    Ok(PolicyValue::from_moments(mean_t, var_t, objective))
}

pub(crate) fn check_policy(coeffs: &DeterministicCoefficients, policy: &LinearFeedbackPolicy) -> Result<()> {
    if policy.grid() != coeffs.grid() {
        return Err(Error::GridMismatch("policy and coefficients live on different grids".into()));
    }
    if policy.dim() != coeffs.dim() {
        return Err(Error::DimensionMismatch { expected: coeffs.dim(), found: policy.dim() });
    }
    Ok(())
}

/// The precommitted optimum of `½ Var(X_T) − (μ₁x₀ + μ₂) E[X_T]` at time 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecommitSolution {
    /// `γ = μ₁x₀ + μ₂`.
    pub gamma: f64,
    /// Affine feedback `u = −Proj_K(θ) x + g_s` with `g` sampled at the left
    /// node of each cell.
    pub policy: LinearFeedbackPolicy,
    /// Intercept `g_s` at the grid nodes.
    pub node_intercept: Vec<Vec<f64>>,
    /// Wealth target `d_s = e^{∫_0^s r}(x₀ + γ e^{∫_0^T(|Proj_K θ|² − r)})` at the
    /// nodes; `u = Proj_K(θ_s)(d_s − X_s)` and `d − X` is a geometric process.
    pub target: Vec<f64>,
    /// `V^pre(x₀)`.
    pub v_pre: f64,
    /// Moments of `X_T` and `J(0, x₀; u^pre)` under the `γ = μ₁x` objective.
    pub value: PolicyValue,
}

/// Precommitted affine feedback
/// `u(s, x) = −Proj_K(θ_s) x + e^{∫_0^s r}(x₀ + γ e^{∫_0^T(|Proj_K θ|² − r)}) Proj_K(θ_s)`
/// and its optimal value
/// `V = −½ γ² (e^{∫|Proj_K θ|²} − 1) − γ e^{∫r} x₀`.
pub fn precommit_solution(coeffs: &DeterministicCoefficients, cone: &ConeSpec, objective: &Objective) -> Result<PrecommitSolution> {
    check_dims(coeffs, cone)?;
    let grid = *coeffs.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let proj = coeffs.projected_premium(cone)?;
    let int_p: f64 = proj.iter().map(|v| norm_sq(v) * dt).sum();
    let int_r = coeffs.rate_between(0, n);
    let gamma = objective.gamma();
    let level = objective.x0 + gamma * exp(int_p - int_r);

    let target: Vec<f64> = (0..=n).map(|i| exp(coeffs.rate_between(0, i)) * level).collect();
    let node_intercept: Vec<Vec<f64>> = target.iter().enumerate().map(|(i, d)| proj[i.min(n - 1)].iter().map(|x| d * x).collect()).collect();
    let slope = proj.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
    let intercept = node_intercept[..n].to_vec();

    let v_pre = -0.5 * gamma * gamma * expm1(int_p) - gamma * exp(int_r) * objective.x0;
    // Y = target − X is a geometric process, which gives the moments directly.
    let mean_t = objective.x0 * exp(int_r) + gamma * expm1(int_p);
    let var_t = gamma * gamma * expm1(int_p);
    Ok(PrecommitSolution {
        gamma,
        policy: LinearFeedbackPolicy::new(grid, slope, Some(intercept))?,
        node_intercept,
        target,
        v_pre,
        value: PolicyValue::from_moments(mean_t, var_t, objective),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Equilibrium,
    Precommitted,
    Feedback,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Equilibrium => "equilibrium",
            Strategy::Precommitted => "precommit",
            Strategy::Feedback => "feedback",
        }
    }
}

/// A failed ordering assertion.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub strategy: Strategy,
    pub j: f64,
    pub j_pre: f64,
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub equilibrium: PolicyValue,
    pub precommit: PolicyValue,
    pub feedback: Option<PolicyValue>,
    /// `∫_0^T |Proj_K θ|²`; the strict ordering is asserted when this and `μ₁`
    /// are nonzero.
    pub int_proj_theta_sq: f64,
    pub violations: Vec<Violation>,
}

impl ComparisonReport {
    pub fn rows(&self) -> Vec<(Strategy, PolicyValue)> {
        let mut rows = vec![(Strategy::Equilibrium, self.equilibrium), (Strategy::Precommitted, self.precommit)];
        if let Some(f) = self.feedback {
            rows.push((Strategy::Feedback, f));
        }
        rows
    }
}

/// Values of the equilibrium, the precommitted optimum and an optional
/// user-supplied linear feedback, with the ordering `J > J_pre` checked.
pub fn compare_strategies(
    coeffs: &DeterministicCoefficients,
    cone: &ConeSpec,
    objective: &Objective,
    feedback: Option<&LinearFeedbackPolicy>,
) -> Result<ComparisonReport> {
    if objective.mu2 != 0.0 {
        return Err(Error::invalid("mu2", "the strategy comparison uses gamma(x) = mu1 x, so mu2 must be 0"));
    }
    let eq = solve_equilibrium(coeffs, cone, objective)?;
    let pre = precommit_solution(coeffs, cone, objective)?;
    let fbe = feedback.map(|c| evaluate_linear_feedback(coeffs, c, objective)).transpose()?;
    let int_p = coeffs.integral_proj_theta_sq(cone, 0.0)?;
    let strict = int_p > 0.0 && objective.mu1 != 0.0;

    let mut violations = Vec::new();
    let j_pre = pre.value.j0;
    let candidates = [(Strategy::Equilibrium, Some(eq.value)), (Strategy::Feedback, fbe)];
    for (strategy, value) in candidates {
        let Some(v) = value else { continue };
        let tol = VALUE_RTOL * v.j0.abs().max(j_pre.abs()).max(1.0);
        let ok = if strict { v.j0 > j_pre } else { v.j0 >= j_pre - tol };
        // Without an investable premium the equilibrium must coincide with the benchmark.
        let equal_ok = strict || strategy != Strategy::Equilibrium || (v.j0 - j_pre).abs() <= tol;
        if !ok || !equal_ok {
            violations.push(Violation { strategy, j: v.j0, j_pre, strict });
        }
    }
    Ok(ComparisonReport { equilibrium: eq.value, precommit: pre.value, feedback: fbe, int_proj_theta_sq: int_p, violations })
}

/// The adjoint pair of the Ansatz for a linear feedback `u = c X`:
/// `p(s;t) = M_s X_s − E_t[M_s X_s] − ρ_s μ₁ X_t` and `k(s) = M_s c_s X_s`,
/// with `M_s = exp(∫_s^T (2r + c'θ))`. For the equilibrium this `M` is the
/// solution of the `(M, U = 0)` equation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPair {
    mu1: f64,
    m: Vec<f64>,
    rho: Vec<f64>,
    theta: Vec<Vec<f64>>,
    feedback: Vec<Vec<f64>>,
    /// `∫_0^{t_i} (r + c'θ)` at the nodes, the log-growth of `E[X]`.
    growth: Vec<f64>,
}

impl AdjointPair {
    fn theta_at(&self, i: usize) -> &[f64] {
        &self.theta[i.min(self.theta.len() - 1)]
    }

    pub fn m(&self, s: usize) -> f64 {
        self.m[s]
    }

    pub fn feedback(&self, s: usize) -> &[f64] {
        &self.feedback[s]
    }

    /// `p(s;t)` given `X_s` and `X_t` on one path, for nodes `t ≤ s`.
    pub fn p(&self, s: usize, t: usize, x_s: f64, x_t: f64) -> f64 {
        let cond_mean = x_t * exp(self.growth[s] - self.growth[t]);
        self.m[s] * (x_s - cond_mean) - self.rho[s] * self.mu1 * x_t
    }

    /// `k(s) = X_s U_s + M_s u_s` with `U = 0`.
    pub fn k(&self, s: usize, x_s: f64) -> Vec<f64> {
        self.feedback[s].iter().map(|c| self.m[s] * c * x_s).collect()
    }

    /// `Λ(s;t) = p(s;t) θ_s + k(s)`.
    pub fn lambda(&self, s: usize, t: usize, x_s: f64, x_t: f64) -> Vec<f64> {
        let p = self.p(s, t, x_s, x_t);
        self.theta_at(s).iter().zip(self.k(s, x_s)).map(|(th, k)| p * th + k).collect()
    }

    /// `Λ(t;t) = X_t (M_t c_t − ρ_t μ₁ θ_t)`.
    pub fn lambda_diag(&self, t: usize, x_t: f64) -> Vec<f64> {
        self.lambda(t, t, x_t, x_t)
    }
}

/// Adjoint processes of the equilibrium.
pub fn adjoint_processes(coeffs: &DeterministicCoefficients, cone: &ConeSpec, objective: &Objective) -> Result<AdjointPair> {
    let sol = solve_equilibrium(coeffs, cone, objective)?;
    let n = coeffs.grid().n_steps();
    let growth = (0..=n).map(|i| ln(sol.m[0] / sol.m[i]) - coeffs.rate_between(0, i)).collect();
    Ok(AdjointPair { mu1: objective.mu1, m: sol.m, rho: sol.rho, theta: coeffs.theta().to_vec(), feedback: sol.node_feedback, growth })
}

/// Adjoint processes of an arbitrary pure linear feedback.
pub fn adjoint_for_policy(coeffs: &DeterministicCoefficients, policy: &LinearFeedbackPolicy, objective: &Objective) -> Result<AdjointPair> {
    check_policy(coeffs, policy)?;
    if policy.is_affine() {
        return Err(Error::invalid("policy", "adjoint representation needs a pure linear feedback"));
    }
    let n = coeffs.grid().n_steps();
    let dt = coeffs.grid().dt();
    let mut growth = vec![0.0; n + 1];
    let mut tail = vec![0.0; n + 1];
    for i in 0..n {
        let ct = dot(policy.slope(i), &coeffs.theta()[i]);
        growth[i + 1] = growth[i] + (coeffs.rate()[i] + ct) * dt;
    }
    for i in (0..n).rev() {
        let ct = dot(policy.slope(i), &coeffs.theta()[i]);
        tail[i] = tail[i + 1] + (2.0 * coeffs.rate()[i] + ct) * dt;
    }
    Ok(AdjointPair {
        mu1: objective.mu1,
        m: tail.iter().map(|&x| exp(x)).collect(),
        rho: (0..=n).map(|i| coeffs.rho_node(i)).collect(),
        theta: coeffs.theta().to_vec(),
        feedback: (0..=n).map(|i| policy.slope(i).to_vec()).collect(),
        growth,
    })
}
