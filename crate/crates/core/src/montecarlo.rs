//! Wealth simulation, Monte Carlo objective estimates and the spike-variation
//! equilibrium verifier.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::bsde::StateFeedback;
use crate::cone::ConeSpec;
use crate::equilibrium::{adjoint_for_policy, check_policy, precommit_solution, LinearFeedbackPolicy, PolicyValue, PrecommitSolution};
use crate::market::{DeterministicCoefficients, FactorThetaModel, Objective, TimeGrid};
use crate::math::{dot, exp, mean_var, norm_sq, pairwise_sum, sqrt};
use crate::parallel::map_indexed;
use crate::rng::{PathRng, Purpose};
use crate::{Error, Result};

/// Time-stepping scheme for the wealth equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Exact per-cell stepping of `ln X` for linear feedback. Affine feedback
    /// is stepped with the exponential (integrating-factor) Euler rule and the
    /// precommitted strategy through its geometric shortfall `d − X`.
    #[default]
    LogEuler,
    /// Plain Euler–Maruyama on `X`.
    Euler,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::LogEuler => "log-euler",
            Scheme::Euler => "euler",
        }
    }
}

impl core::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-euler" => Ok(Scheme::LogEuler),
            "euler" => Ok(Scheme::Euler),
            other => Err(Error::invalid("scheme", format!("unknown scheme {other:?}; expected log-euler or euler"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Pair path `2k` with path `2k + 1` driven by the negated increments.
    pub antithetic: bool,
}

impl SimulationConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Result<Self> {
        let c = Self { n_paths, n_steps, seed, scheme: Scheme::LogEuler, antithetic: false };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 100 {
            return Err(Error::invalid("n_paths", "must be at least 100"));
        }
        if self.n_steps < 10 {
            return Err(Error::invalid("n_steps", "must be at least 10"));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(Error::invalid("n_paths", "must be even with antithetic pairs"));
        }
        Ok(())
    }
}

/// Coefficients seen by the simulator.
#[derive(Debug, Clone, Copy)]
pub enum Market<'a> {
    Deterministic(&'a DeterministicCoefficients),
    Factor { model: &'a FactorThetaModel, grid: TimeGrid },
}

impl Market<'_> {
    pub fn grid(&self) -> &TimeGrid {
        match self {
            Market::Deterministic(c) => c.grid(),
            Market::Factor { grid, .. } => grid,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Market::Deterministic(c) => c.dim(),
            Market::Factor { model, .. } => model.dim(),
        }
    }
}

/// Strategy to simulate.
#[derive(Debug, Clone, Copy)]
pub enum Feedback<'a> {
    /// `u = c X + g` with deterministic cells.
    Linear(&'a LinearFeedbackPolicy),
    /// The precommitted optimum.
    Precommit(&'a PrecommitSolution),
    /// `u = α(t, Y_t) X` from the BSDE solution.
    State(&'a StateFeedback),
}

type Shortfall = (f64, Vec<(f64, Vec<f64>)>);

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub antithetic: bool,
    pub mean_t: f64,
    pub mean_se: f64,
    pub var_t: f64,
    pub var_se: f64,
    pub j0: f64,
    pub j0_se: f64,
    pub min_t: f64,
    pub max_t: f64,
    /// Paths on which wealth was `≤ 0` at some node.
    pub nonpositive_paths: usize,
}

/// Result of comparing a report with closed-form moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticCheck {
    pub mean_ok: bool,
    pub var_ok: bool,
    pub j0_ok: bool,
}

impl AnalyticCheck {
    pub fn all(&self) -> bool {
        self.mean_ok && self.var_ok && self.j0_ok
    }
}

fn within(est: f64, se: f64, target: f64, k: f64) -> bool {
    (est - target).abs() <= k * se + 1e-12 * target.abs().max(1.0)
}

impl SimulationReport {
    /// Each estimate within `k` standard errors of its closed form.
    pub fn check(&self, analytic: &PolicyValue, k: f64) -> AnalyticCheck {
        AnalyticCheck {
            mean_ok: within(self.mean_t, self.mean_se, analytic.mean_t, k),
            var_ok: within(self.var_t, self.var_se, analytic.var_t, k),
            j0_ok: within(self.j0, self.j0_se, analytic.j0, k),
        }
    }
}

struct Kernel<'a> {
    market: Market<'a>,
    feedback: Feedback<'a>,
    scheme: Scheme,
    x0: f64,
    rate: Vec<f64>,
    /// `(|P|², −P)` per cell for the precommitted shortfall recursion.
    shortfall: Option<Shortfall>,
}

impl<'a> Kernel<'a> {
    fn new(market: Market<'a>, feedback: Feedback<'a>, scheme: Scheme, x0: f64) -> Result<Self> {
        let grid = *market.grid();
        let rate = match market {
            Market::Deterministic(c) => c.rate().to_vec(),
            Market::Factor { model, grid } => {
                model.check_grid(&grid)?;
                model.rate_cells(&grid)
            }
        };
        let mut shortfall = None;
        match feedback {
            Feedback::Linear(p) => {
                if p.grid() != &grid {
                    return Err(Error::GridMismatch("policy and market live on different grids".into()));
                }
                if p.dim() != market.dim() {
                    return Err(Error::DimensionMismatch { expected: market.dim(), found: p.dim() });
                }
            }
            Feedback::Precommit(pre) => {
                let Market::Deterministic(c) = market else {
                    return Err(Error::invalid("policy", "the precommitted strategy needs deterministic coefficients"));
                };
                check_policy(c, &pre.policy)?;
                if scheme == Scheme::LogEuler {
                    let cells = pre.policy.slopes().iter().map(|s| (norm_sq(s), s.clone())).collect();
                    shortfall = Some((pre.target[0] - x0, cells));
                }
            }
            Feedback::State(sf) => {
                let Market::Factor { model, grid } = market else {
                    return Err(Error::invalid("policy", "state feedback needs the factor market"));
                };
                sf.check_compatible(model, &grid)?;
            }
        }
        Ok(Self { market, feedback, scheme, x0, rate, shortfall })
    }

    /// Simulates one path; returns `(X_T, wealth hit ≤ 0)`.
    fn run(&self, rng: &mut PathRng, sign: f64) -> (f64, bool) {
        let grid = self.market.grid();
        let n = grid.n_steps();
        let dt = grid.dt();
        let sdt = sqrt(dt);
        let d = self.market.dim();
        let mut dw = vec![0.0; d];
        let mut theta_buf = vec![0.0; d];
        let mut u = vec![0.0; d];
        let mut x = self.x0;
        let mut y = match self.market {
            Market::Factor { model, .. } => model.y0,
            Market::Deterministic(_) => 0.0,
        };
        let mut geo = 1.0;
        let mut hit = x <= 0.0;
        for i in 0..n {
            rng.fill_normal(&mut dw);
            dw.iter_mut().for_each(|z| *z *= sign * sdt);
            let r = self.rate[i];
            let theta: &[f64] = match self.market {
                Market::Deterministic(c) => &c.theta()[i],
                Market::Factor { model, .. } => {
                    model.theta_of(y, &mut theta_buf);
                    &theta_buf
                }
            };
            match self.feedback {
                Feedback::Linear(p) => match p.intercept(i) {
                    None => x = self.linear_step(x, r, theta, p.slope(i), &dw, dt),
                    Some(g) => {
                        let c = p.slope(i);
                        for k in 0..d {
                            u[k] = c[k] * x + g[k];
                        }
                        x = self.affine_step(x, r, theta, &u, &dw, dt);
                    }
                },
                Feedback::Precommit(pre) => match &self.shortfall {
                    Some((y0, cells)) => {
                        let (p, neg_proj) = &cells[i];
                        geo *= exp((r - 1.5 * p) * dt + dot(neg_proj, &dw));
                        x = pre.target[i + 1] - y0 * geo;
                    }
                    None => {
                        let c = pre.policy.slope(i);
                        let g = pre.policy.intercept(i).unwrap_or(&[]);
                        for k in 0..d {
                            u[k] = c[k] * x + g[k];
                        }
                        x = self.affine_step(x, r, theta, &u, &dw, dt);
                    }
                },
                Feedback::State(sf) => {
                    sf.alpha(i, y, theta, &mut u);
                    x = self.linear_step(x, r, theta, &u, &dw, dt);
                }
            }
            if let Market::Factor { model, .. } = self.market {
                y = model.advance(y, dt, &dw);
            }
            hit |= x <= 0.0;
        }
        (x, hit)
    }

    #[inline]
    fn linear_step(&self, x: f64, r: f64, theta: &[f64], c: &[f64], dw: &[f64], dt: f64) -> f64 {
        match self.scheme {
            Scheme::LogEuler => x * exp((r + dot(c, theta) - 0.5 * norm_sq(c)) * dt + dot(c, dw)),
            Scheme::Euler => x + x * ((r + dot(c, theta)) * dt + dot(c, dw)),
        }
    }

    #[inline]
    fn affine_step(&self, x: f64, r: f64, theta: &[f64], u: &[f64], dw: &[f64], dt: f64) -> f64 {
        match self.scheme {
            Scheme::LogEuler => exp(r * dt) * (x + dot(theta, u) * dt + dot(u, dw)),
            Scheme::Euler => x + (r * x + dot(theta, u)) * dt + dot(u, dw),
        }
    }
}

/// Simulates `dX = (rX + θ'u) ds + u'dW` from `x₀` and returns the terminal
/// wealth of every path with the summary report. Path `p` uses the stream
/// `(seed, p, Wealth)`, or `(seed, p / 2, Wealth)` negated for odd `p` with
/// antithetic pairs.
pub fn simulate_wealth(feedback: Feedback<'_>, market: Market<'_>, objective: &Objective, config: &SimulationConfig) -> Result<(Vec<f64>, SimulationReport)> {
    config.validate()?;
    if config.n_steps != market.grid().n_steps() {
        return Err(Error::GridMismatch(format!("simulation uses {} steps but the market grid has {}", config.n_steps, market.grid().n_steps())));
    }
    let kernel = Kernel::new(market, feedback, config.scheme, objective.x0)?;
    let runs = map_indexed(config.n_paths, |p| {
        let (stream, sign) = if config.antithetic { (p / 2, if p % 2 == 1 { -1.0 } else { 1.0 }) } else { (p, 1.0) };
        let mut rng = PathRng::new(config.seed, stream as u64, Purpose::Wealth);
        kernel.run(&mut rng, sign)
    });
    let terminal: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let nonpositive_paths = runs.iter().filter(|r| r.1).count();
    let report = summarize(&terminal, objective, config, nonpositive_paths);
    Ok((terminal, report))
}

fn summarize(xs: &[f64], objective: &Objective, config: &SimulationConfig, nonpositive_paths: usize) -> SimulationReport {
    let n = xs.len();
    let min_t = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_t = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mean_t, var_t) = if min_t == max_t { (min_t, 0.0) } else { mean_var(xs) };
    let gamma = objective.mu1 * objective.x0;
    // Standard errors from i.i.d. units: single paths, or antithetic pair means.
    let unit = if config.antithetic { 2 } else { 1 };
    let se = |f: &dyn Fn(f64) -> f64| -> f64 {
        let vals: Vec<f64> = xs.chunks(unit).map(|c| pairwise_sum(&c.iter().map(|&x| f(x)).collect::<Vec<_>>()) / c.len() as f64).collect();
        let (_, v) = mean_var(&vals);
        sqrt(v / vals.len() as f64)
    };
    let (mean_se, var_se, j0_se) =
        if var_t == 0.0 { (0.0, 0.0, 0.0) } else { (se(&|x| x), se(&|x| (x - mean_t) * (x - mean_t)), se(&|x| 0.5 * (x - mean_t) * (x - mean_t) - gamma * x)) };
    SimulationReport {
        n_paths: n,
        n_steps: config.n_steps,
        seed: config.seed,
        scheme: config.scheme,
        antithetic: config.antithetic,
        mean_t,
        mean_se,
        var_t,
        var_se,
        j0: 0.5 * var_t - gamma * mean_t,
        j0_se,
        min_t,
        max_t,
        nonpositive_paths,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecommitEstimate {
    pub report: SimulationReport,
    /// `J(0, x₀; u^pre) = −½ x₀² μ₁² (e^{∫|Proj_K θ|²} − 1) − x₀² μ₁ e^{∫r}`.
    pub analytic: PolicyValue,
    pub check: AnalyticCheck,
}

/// Simulates the precommitted strategy and compares with its closed form.
pub fn estimate_j_for_precommit(
    coeffs: &DeterministicCoefficients,
    cone: &ConeSpec,
    objective: &Objective,
    config: &SimulationConfig,
) -> Result<PrecommitEstimate> {
    if objective.mu2 != 0.0 {
        return Err(Error::invalid("mu2", "must be 0 for the precommitted J estimate"));
    }
    let pre = precommit_solution(coeffs, cone, objective)?;
    let (_, report) = simulate_wealth(Feedback::Precommit(&pre), Market::Deterministic(coeffs), objective, config)?;
    let check = report.check(&pre.value, 3.0);
    Ok(PrecommitEstimate { report, analytic: pre.value, check })
}

/// `H(t) = ρ_t² I`, the second-order coefficient of the spike expansion.
pub fn second_order_coefficient(coeffs: &DeterministicCoefficients, t: f64) -> Result<Vec<Vec<f64>>> {
    let rho = coeffs.rho(t)?;
    let l = coeffs.dim();
    Ok((0..l).map(|i| (0..l).map(|j| if i == j { rho * rho } else { 0.0 }).collect()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpikeConfig {
    /// Conditioning states `X_t`.
    pub n_outer: usize,
    /// Continuations per conditioning state.
    pub n_inner: usize,
    /// Sub-steps per grid cell inside the spike window.
    pub substeps: usize,
    pub seed: u64,
}

impl SpikeConfig {
    pub fn new(seed: u64) -> Self {
        Self { n_outer: 200, n_inner: 2000, substeps: 8, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.n_outer < 2 || self.n_inner < 2 {
            return Err(Error::invalid("spike", "n_outer and n_inner must be at least 2"));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("substeps", "must be at least 1"));
        }
        Ok(())
    }
}

/// `(ΔJ/ε, first order, second order, second-order scale of c)` for one conditioning state.
type SpikeSample = (f64, f64, f64, f64);

/// One `(t, w, ε)` cell of the spike table.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRecord {
    pub t: f64,
    pub epsilon: f64,
    pub w: Vec<f64>,
    /// Mean over conditioning states of `(J(t, X_t; u^ε) − J(t, X_t; u*)) / ε`.
    pub dj_over_eps: f64,
    pub se: f64,
    /// Mean of `⟨Λ(t;t), v − u*_t⟩`.
    pub first_order: f64,
    /// Mean of `½ ⟨H(t)(v − u*_t), v − u*_t⟩`.
    pub second_order: f64,
    /// Slack constant of the `o(ε)` allowance.
    pub kappa: f64,
    /// Standard error of the estimate minus the path-wise expansion.
    pub se_expansion: f64,
    /// `dj_over_eps ≥ −(3 se + κ ε)`.
    pub pass: bool,
    /// `|dj_over_eps − (first + second)| ≤ 3 se_expansion + κ ε`.
    pub matches_expansion: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTestReport {
    pub records: Vec<SpikeRecord>,
    pub config: SpikeConfig,
}

impl SpikeTestReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    pub fn all_match_expansion(&self) -> bool {
        self.records.iter().all(|r| r.matches_expansion)
    }
}

/// The standard perturbation set `{0, c_t, 2c_t, Proj_K(c_t + e₁)}`.
pub fn spike_candidates(policy: &LinearFeedbackPolicy, cone: &ConeSpec, t: f64) -> Result<Vec<Vec<f64>>> {
    let i = node_of(policy.grid(), t)?;
    let c = policy.slope(i).to_vec();
    let mut e = c.clone();
    e[0] += 1.0;
    Ok(vec![vec![0.0; c.len()], c.clone(), c.iter().map(|x| 2.0 * x).collect(), cone.project(&e)?])
}

fn node_of(grid: &TimeGrid, t: f64) -> Result<usize> {
    grid.check_time(t)?;
    match grid.node_index(t) {
        Some(i) if i < grid.n_steps() => Ok(i),
        _ => Err(Error::invalid("t", format!("{t} is not a grid node before the horizon"))),
    }
}

/// Estimates `ΔJ/ε` for spike perturbations `v = w X_t` on `[t, t+ε)` of the
/// linear feedback `policy`, against the first- plus second-order expansion.
///
/// After the window the control reverts to the unperturbed control process,
/// so the perturbation of wealth grows at the riskless rate. Conditioning
/// states are simulated on `(seed, o, Outer)`; continuation `j` of state `o`
/// uses `(seed, o·n_inner + j, Inner)` and is shared by every `(w, ε)`. The
/// continuation beyond `t + ε` is replaced by its conditional mean, which is
/// exact for linear feedback.
#[allow(clippy::too_many_arguments)]
pub fn spike_variation_test(
    policy: &LinearFeedbackPolicy,
    coeffs: &DeterministicCoefficients,
    cone: &ConeSpec,
    objective: &Objective,
    t: f64,
    ws: &[Vec<f64>],
    epsilons: &[f64],
    config: &SpikeConfig,
) -> Result<SpikeTestReport> {
    config.validate()?;
    check_policy(coeffs, policy)?;
    if policy.is_affine() {
        return Err(Error::invalid("policy", "the spike test needs a pure linear feedback"));
    }
    if objective.mu2 != 0.0 {
        return Err(Error::invalid("mu2", "the spike test uses gamma(x) = mu1 x, so mu2 must be 0"));
    }
    let grid = *coeffs.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let i0 = node_of(&grid, t)?;
    for w in ws {
        if w.len() != coeffs.dim() {
            return Err(Error::DimensionMismatch { expected: coeffs.dim(), found: w.len() });
        }
        if !cone.contains(w, 1e-12)? {
            return Err(Error::NotInCone { projected: cone.project(w)? });
        }
    }
    let mut cells = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let k = libm::round(eps / dt);
        if !(eps >= dt * (1.0 - 1e-9)) {
            return Err(Error::invalid("epsilon", format!("{eps} is smaller than the grid step {dt}")));
        }
        if (k * dt - eps).abs() > 1e-9 * dt {
            return Err(Error::invalid("epsilon", format!("{eps} is not a multiple of the grid step {dt}")));
        }
        let k = k as usize;
        if i0 + k > n {
            return Err(Error::invalid("epsilon", format!("t + {eps} exceeds the horizon")));
        }
        cells.push(k);
    }
    let k_max = cells.iter().copied().max().unwrap_or(0);
    let d = coeffs.dim();

    let adjoint = adjoint_for_policy(coeffs, policy, objective)?;
    let lambda_unit = adjoint.lambda_diag(i0, 1.0);
    let rho_t = coeffs.rho_node(i0);
    let c_t = policy.slope(i0).to_vec();
    // Log-growth of E[X] and the discount from each node to T.
    let mut growth = vec![0.0; n + 1];
    for i in 0..n {
        growth[i + 1] = growth[i] + (coeffs.rate()[i] + dot(policy.slope(i), &coeffs.theta()[i])) * dt;
    }
    let combos: Vec<(usize, usize)> = (0..ws.len()).flat_map(|a| (0..cells.len()).map(move |b| (a, b))).collect();
    let h = dt / config.substeps as f64;
    let sh = sqrt(h);

    // Per outer state: (ΔJ/ε, first, second, ½ρ²|c|²X²) for every combo.
    let outer = map_indexed(config.n_outer, |o| {
        let mut rng = PathRng::new(config.seed, o as u64, Purpose::Outer);
        let mut z = vec![0.0; d];
        let mut x_t = objective.x0;
        for i in 0..i0 {
            rng.fill_normal(&mut z);
            let c = policy.slope(i);
            x_t *= exp((coeffs.rate()[i] + dot(c, &coeffs.theta()[i]) - 0.5 * norm_sq(c)) * dt + sqrt(dt) * dot(c, &z));
        }
        let x2 = x_t * x_t;
        let v: Vec<Vec<f64>> = ws.iter().map(|w| w.iter().map(|a| a * x_t).collect()).collect();

        // x_at[j][k] = X at t + k Δt; delta[j][(a, k)] the wealth perturbation.
        let mut x_at = vec![0.0; config.n_inner * (k_max + 1)];
        let mut delta = vec![0.0; config.n_inner * ws.len() * (k_max + 1)];
        let mut dw = vec![0.0; d];
        let mut dd = vec![0.0; ws.len()];
        for j in 0..config.n_inner {
            let mut rng = PathRng::new(config.seed, (o * config.n_inner + j) as u64, Purpose::Inner);
            let mut x = x_t;
            dd.iter_mut().for_each(|q| *q = 0.0);
            x_at[j * (k_max + 1)] = x;
            for k in 0..k_max {
                let i = i0 + k;
                let c = policy.slope(i);
                let r = coeffs.rate()[i];
                let th = &coeffs.theta()[i];
                let log_drift = (r + dot(c, th) - 0.5 * norm_sq(c)) * h;
                let er = exp(r * h);
                for _ in 0..config.substeps {
                    rng.fill_normal(&mut dw);
                    dw.iter_mut().for_each(|q| *q *= sh);
                    for (a, va) in v.iter().enumerate() {
                        let mut s = 0.0;
                        for l in 0..d {
                            s += (va[l] - c[l] * x) * (th[l] * h + dw[l]);
                        }
                        dd[a] = er * dd[a] + s;
                    }
                    x *= exp(log_drift + dot(c, &dw));
                }
                x_at[j * (k_max + 1) + k + 1] = x;
                for (a, q) in dd.iter().enumerate() {
                    delta[(j * ws.len() + a) * (k_max + 1) + k + 1] = *q;
                }
            }
        }

        let mut out = Vec::with_capacity(combos.len());
        let mut zs = vec![0.0; config.n_inner];
        let mut ds = vec![0.0; config.n_inner];
        for &(a, b) in &combos {
            let k = cells[b];
            let eps = k as f64 * dt;
            let carry = exp(growth[n] - growth[i0 + k]);
            let disc = exp(coeffs.rate_between(i0 + k, n));
            for j in 0..config.n_inner {
                zs[j] = x_at[j * (k_max + 1) + k] * carry;
                ds[j] = delta[(j * ws.len() + a) * (k_max + 1) + k] * disc;
            }
            let (mz, _) = mean_var(&zs);
            let (md, vd) = mean_var(&ds);
            let cov = pairwise_sum(&(0..config.n_inner).map(|j| (zs[j] - mz) * (ds[j] - md)).collect::<Vec<_>>()) / (config.n_inner - 1) as f64;
            let dj = cov + 0.5 * vd - objective.mu1 * x_t * md;
            let diff: Vec<f64> = ws[a].iter().zip(&c_t).map(|(w, c)| w - c).collect();
            let first = x2 * dot(&lambda_unit, &diff);
            let second = 0.5 * rho_t * rho_t * norm_sq(&diff) * x2;
            let scale_c = 0.5 * rho_t * rho_t * norm_sq(&c_t) * x2;
            out.push((dj / eps, first, second, scale_c));
        }
        out
    });

    let n_outer = config.n_outer as f64;
    let records = combos
        .iter()
        .enumerate()
        .map(|(q, &(a, b))| {
            let col = |f: fn(&SpikeSample) -> f64| -> Vec<f64> { outer.iter().map(|row| f(&row[q])).collect() };
            let (est, var_est) = mean_var(&col(|r| r.0));
            let (first, _) = mean_var(&col(|r| r.1));
            let (second, _) = mean_var(&col(|r| r.2));
            let (scale_c, _) = mean_var(&col(|r| r.3));
            let (_, var_diff) = mean_var(&col(|r| r.0 - r.1 - r.2));
            let se = sqrt(var_est / n_outer);
            let se_expansion = sqrt(var_diff / n_outer);
            let eps = cells[b] as f64 * dt;
            let kappa = 2.0 * (second.abs() + scale_c);
            SpikeRecord {
                t: grid.node(i0),
                epsilon: eps,
                w: ws[a].clone(),
                dj_over_eps: est,
                se,
                first_order: first,
                second_order: second,
                kappa,
                se_expansion,
                pass: est >= -(3.0 * se + kappa * eps),
                matches_expansion: (est - first - second).abs() <= 3.0 * se_expansion + kappa * eps,
            }
        })
        .collect();
    Ok(SpikeTestReport { records, config: *config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{evaluate_linear_feedback, solve_equilibrium};

    fn benchmark(n: usize) -> (DeterministicCoefficients, ConeSpec, Objective) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        (DeterministicCoefficients::constant(grid, 0.0, vec![1.0]).unwrap(), ConeSpec::nonnegative_orthant(1).unwrap(), Objective::new(1.0, 0.0, 1.0).unwrap())
    }

    #[test]
    fn cash_only_is_deterministic() {
        let (c, _, obj) = benchmark(20);
        let zero = LinearFeedbackPolicy::zero(*c.grid(), 1);
        let cfg = SimulationConfig::new(200, 20, 3).unwrap();
        for scheme in [Scheme::LogEuler, Scheme::Euler] {
            let cfg = SimulationConfig { scheme, ..cfg };
            let (xs, rep) = simulate_wealth(Feedback::Linear(&zero), Market::Deterministic(&c), &obj, &cfg).unwrap();
            assert!(xs.iter().all(|&x| x == 1.0));
            assert_eq!((rep.mean_t, rep.var_t, rep.j0), (1.0, 0.0, -1.0));
        }
    }

    #[test]
    fn log_euler_matches_closed_form_on_benchmark() {
        let (c, k, obj) = benchmark(50);
        let sol = solve_equilibrium(&c, &k, &obj).unwrap();
        let cfg = SimulationConfig::new(20_000, 50, 11).unwrap();
        let (_, rep) = simulate_wealth(Feedback::Linear(&sol.policy), Market::Deterministic(&c), &obj, &cfg).unwrap();
        let exact = evaluate_linear_feedback(&c, &sol.policy, &obj).unwrap();
        assert!(rep.check(&exact, 3.0).all(), "{rep:?} vs {exact:?}");
        assert_eq!(rep.nonpositive_paths, 0);
    }

    #[test]
    fn reports_are_reproducible() {
        let (c, k, obj) = benchmark(20);
        let sol = solve_equilibrium(&c, &k, &obj).unwrap();
        let cfg = SimulationConfig { antithetic: true, ..SimulationConfig::new(400, 20, 5).unwrap() };
        let a = simulate_wealth(Feedback::Linear(&sol.policy), Market::Deterministic(&c), &obj, &cfg).unwrap();
        let b = simulate_wealth(Feedback::Linear(&sol.policy), Market::Deterministic(&c), &obj, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn antithetic_pairs_negate_increments() {
        let (c, k, obj) = benchmark(10);
        let sol = solve_equilibrium(&c, &k, &obj).unwrap();
        let cfg = SimulationConfig { antithetic: true, ..SimulationConfig::new(100, 10, 9).unwrap() };
        let (xs, _) = simulate_wealth(Feedback::Linear(&sol.policy), Market::Deterministic(&c), &obj, &cfg).unwrap();
        // ln X_T = Σ (c − c²/2)Δ ± Σ c ΔW, so the pair's log-wealth averages to the drift.
        let drift: f64 = sol.policy.slopes().iter().map(|v| (v[0] - 0.5 * v[0] * v[0]) * 0.1).sum();
        for pair in xs.chunks(2) {
            assert!((0.5 * (crate::math::ln(pair[0]) + crate::math::ln(pair[1])) - drift).abs() < 1e-12);
        }
    }

    #[test]
    fn precommit_shortfall_and_euler_agree() {
        let (c, k, obj) = benchmark(200);
        let cfg = SimulationConfig::new(20_000, 200, 2).unwrap();
        let est = estimate_j_for_precommit(&c, &k, &obj, &cfg).unwrap();
        assert!(est.check.all(), "{est:?}");
        let euler = estimate_j_for_precommit(&c, &k, &obj, &SimulationConfig { scheme: Scheme::Euler, ..cfg }).unwrap();
        assert!((euler.report.j0 - est.analytic.j0).abs() < 4.0 * euler.report.j0_se + 0.02);
    }

    #[test]
    fn precommit_without_premium_is_cash() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let c = DeterministicCoefficients::constant(g, 0.05, vec![-1.0]).unwrap();
        let k = ConeSpec::nonnegative_orthant(1).unwrap();
        let obj = Objective::new(1.0, 0.0, 2.0).unwrap();
        let est = estimate_j_for_precommit(&c, &k, &obj, &SimulationConfig::new(100, 10, 1).unwrap()).unwrap();
        assert_eq!(est.report.var_t, 0.0);
        assert!((est.report.j0 + 4.0 * exp(0.05)).abs() < 1e-12);
        let null = Objective::new(0.0, 0.0, 1.0).unwrap();
        let (c, k, _) = benchmark(10);
        let est = estimate_j_for_precommit(&c, &k, &null, &SimulationConfig::new(100, 10, 1).unwrap()).unwrap();
        assert_eq!(est.report.j0, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SimulationConfig::new(99, 10, 0).is_err());
        assert!(SimulationConfig::new(100, 9, 0).is_err());
        let (c, _, obj) = benchmark(20);
        let zero = LinearFeedbackPolicy::zero(*c.grid(), 1);
        let cfg = SimulationConfig::new(100, 10, 0).unwrap();
        assert!(matches!(simulate_wealth(Feedback::Linear(&zero), Market::Deterministic(&c), &obj, &cfg), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn second_order_examples() {
        let (c, _, _) = benchmark(10);
        assert_eq!(second_order_coefficient(&c, 0.3).unwrap(), vec![vec![1.0]]);
        let g = TimeGrid::new(1.0, 10).unwrap();
        let c = DeterministicCoefficients::constant(g, 0.05, vec![0.2, 0.1]).unwrap();
        let h = second_order_coefficient(&c, 0.0).unwrap();
        assert!((h[0][0] - exp(0.1)).abs() < 1e-14 && h[0][1] == 0.0);
        assert_eq!(second_order_coefficient(&c, 1.0).unwrap()[1][1], 1.0);
    }

    #[test]
    fn spike_input_validation() {
        let (c, k, obj) = benchmark(100);
        let sol = solve_equilibrium(&c, &k, &obj).unwrap();
        let cfg = SpikeConfig { n_outer: 4, n_inner: 10, substeps: 1, seed: 0 };
        let run = |t: f64, w: Vec<f64>, e: f64| spike_variation_test(&sol.policy, &c, &k, &obj, t, &[w], &[e], &cfg);
        assert!(run(0.0, vec![1.0], 0.005).is_err());
        assert!(run(0.0, vec![1.0], 0.015).is_err());
        assert!(run(0.995, vec![1.0], 0.02).is_err());
        assert!(run(0.0, vec![1.0], 0.01).is_ok());
        match run(0.0, vec![-1.0], 0.01) {
            Err(Error::NotInCone { projected }) => assert_eq!(projected, vec![0.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn null_perturbation_is_small() {
        let (c, k, obj) = benchmark(100);
        let sol = solve_equilibrium(&c, &k, &obj).unwrap();
        let cfg = SpikeConfig { n_outer: 20, n_inner: 400, substeps: 4, seed: 1 };
        let w = vec![sol.policy.slope(0).to_vec()];
        let rep = spike_variation_test(&sol.policy, &c, &k, &obj, 0.0, &w, &[0.01], &cfg).unwrap();
        let r = &rep.records[0];
        assert_eq!(r.second_order, 0.0);
        assert!(r.dj_over_eps.abs() < 0.01, "{r:?}");
        assert!(r.pass && r.matches_expansion);
    }
}
