//! Regression Monte Carlo for the quadratic BSDE
//! `dM = −[2rM + (θM + U)'Proj_K(M⁻¹(ρμ₁θ − U))] ds + U'dW`, `M_T = 1`,
//! with a risk premium driven by a scalar factor `Y`.
//!
//! The backward sweep is implicit in `M` and explicit in `U`. Conditional
//! expectations given `Y_{t_i}` are least-squares fits on monomials of the
//! standardized factor. `U` is regressed on the centred increment
//! `(M_{i+1} − Ê[M_{i+1} | Y_i]) ΔW_i`, which has the same conditional mean
//! as `M_{i+1} ΔW_i` but far less noise.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::cone::ConeSpec;
use crate::market::{sample_factor_paths, sample_factor_paths_for, CoefficientBounds, DeterministicCoefficients, FactorPaths, FactorThetaModel, TimeGrid};
use crate::math::{cholesky, cholesky_solve, dot, exp, mean_var, pairwise_sum_by, sqrt};
use crate::parallel::map_indexed;
use crate::rng::Purpose;
use crate::{Error, Result};

/// Ridge on the non-constant basis functions; the intercept is not penalised.
const RIDGE: f64 = 1e-10;
const MAX_FIXED_POINT: usize = 50;
const FIXED_POINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsdeConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub basis_degree: usize,
    /// Truncation level; `None` uses [`positivity_floor`].
    pub floor_c: Option<f64>,
    pub seed: u64,
}

impl BsdeConfig {
    pub fn new(n_paths: usize, n_steps: usize, basis_degree: usize, seed: u64) -> Result<Self> {
        let c = Self { n_paths, n_steps, basis_degree, floor_c: None, seed };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 1000 {
            return Err(Error::invalid("n_paths", "must be at least 1000"));
        }
        if self.n_steps < 10 {
            return Err(Error::invalid("n_steps", "must be at least 10"));
        }
        if !(1..=5).contains(&self.basis_degree) {
            return Err(Error::invalid("basis_degree", "must be between 1 and 5"));
        }
        if let Some(f) = self.floor_c {
            if !(f > 0.0) || !f.is_finite() {
                return Err(Error::invalid("floor_c", "must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// `η = exp(−2 max|r| T)`, a lower bound for `M` when `μ₁ ≥ 0`.
pub fn positivity_floor(model: &FactorThetaModel, mu1: f64) -> Result<f64> {
    if !(mu1 >= 0.0) {
        return Err(Error::invalid("mu1", "the positivity bound needs mu1 >= 0"));
    }
    Ok(exp(-2.0 * model.rate_bound() * model.horizon()))
}

/// Regression fit at one time node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFit {
    pub mean_y: f64,
    /// Zero when the factor is degenerate at this node; the basis is then the constant.
    pub sd_y: f64,
    /// Coefficients of `Ê[M_{i+1} | Y_i]`.
    pub m_coef: Vec<f64>,
    /// Coefficients of each component of `U_i`.
    pub u_coef: Vec<Vec<f64>>,
    /// Root mean square residual of the `M` regression.
    pub residual_rms: f64,
    /// Minimum of `M_i` over the paths.
    pub min_m: f64,
    /// Maximum of `|U_i|` over the paths.
    pub max_u: f64,
}

impl NodeFit {
    fn basis(&self, y: f64, out: &mut [f64]) {
        let z = if self.sd_y > 0.0 { (y - self.mean_y) / self.sd_y } else { 0.0 };
        let mut p = 1.0;
        for o in out.iter_mut() {
            *o = p;
            p *= z;
        }
    }

    fn eval(coef: &[f64], phi: &[f64]) -> f64 {
        dot(coef, &phi[..coef.len()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeDiagnostics {
    pub min_m: f64,
    pub max_abs_u: f64,
    /// Path–node pairs where the implicit `M` fell below the floor.
    pub floor_binding: usize,
    pub max_residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    model: FactorThetaModel,
    cone: ConeSpec,
    grid: TimeGrid,
    mu1: f64,
    floor: f64,
    rate: Vec<f64>,
    rho: Vec<f64>,
    fits: Vec<NodeFit>,
    n_train: usize,
    pub diagnostics: BsdeDiagnostics,
}

struct Driver<'a> {
    cone: &'a ConeSpec,
    mu1: f64,
    floor: f64,
}

impl Driver<'_> {
    /// `f = 2rM + (θM + U)'Proj_K(M⁻¹(ρμ₁θ − U))` at `M ∨ floor`.
    fn f(&self, m: f64, u: &[f64], r: f64, rho: f64, theta: &[f64], buf: &mut [f64]) -> f64 {
        let m = m.max(self.floor);
        for k in 0..buf.len() {
            buf[k] = (rho * self.mu1 * theta[k] - u[k]) / m;
        }
        let p = self.cone.project(buf).expect("dimensions checked at construction");
        let mut s = 2.0 * r * m;
        for k in 0..p.len() {
            s += (theta[k] * m + u[k]) * p[k];
        }
        s
    }

    /// Solves `M = e + Δt f(M ∨ floor, U)` by fixed-point iteration.
    #[allow(clippy::too_many_arguments)]
    fn implicit(&self, e: f64, u: &[f64], r: f64, rho: f64, theta: &[f64], dt: f64, node: usize, buf: &mut [f64]) -> Result<f64> {
        let mut m = e;
        for _ in 0..MAX_FIXED_POINT {
            let next = e + dt * self.f(m, u, r, rho, theta, buf);
            if (next - m).abs() <= FIXED_POINT_TOL * next.abs().max(1.0) {
                return Ok(next);
            }
            m = next;
        }
        Err(Error::FixedPointNoConvergence { node })
    }
}

/// Least squares on the Gram matrix of the basis, with pairwise reductions.
fn fit(phi: &[f64], p: usize, b: &[f64], chol: &[f64]) -> Vec<f64> {
    let n = b.len();
    let rhs: Vec<f64> = (0..p).map(|k| pairwise_sum_by(n, &|j| phi[j * p + k] * b[j]) / n as f64).collect();
    cholesky_solve(chol, p, &rhs)
}

/// Solves the truncated BSDE backward on `config.n_steps` cells.
pub fn solve_quadratic_bsde(model: &FactorThetaModel, cone: &ConeSpec, mu1: f64, config: &BsdeConfig) -> Result<BsdeSolution> {
    config.validate()?;
    if model.dim() != cone.dim() {
        return Err(Error::DimensionMismatch { expected: cone.dim(), found: model.dim() });
    }
    let floor = match config.floor_c {
        Some(f) => f,
        None => positivity_floor(model, mu1)?,
    };
    let grid = TimeGrid::new(model.horizon(), config.n_steps)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let d = model.dim();
    let rate = model.rate_cells(&grid);
    let mut rho = vec![1.0; n + 1];
    for i in (0..n).rev() {
        rho[i] = rho[i + 1] * exp(rate[i] * dt);
    }
    let paths = sample_factor_paths(model, &grid, config.n_paths, config.seed)?;
    let np = config.n_paths;
    let driver = Driver { cone, mu1, floor };

    let mut m_next = vec![1.0; np];
    let mut fits = vec![NodeFit { mean_y: 0.0, sd_y: 0.0, m_coef: vec![], u_coef: vec![], residual_rms: 0.0, min_m: 1.0, max_u: 0.0 }; n];
    let mut floor_binding = 0;
    for i in (0..n).rev() {
        let ys: Vec<f64> = (0..np).map(|j| paths.y(j, i)).collect();
        let (mean_y, var_y) = mean_var(&ys);
        let sd_y = sqrt(var_y);
        let degenerate = !(sd_y > 1e-12 * (1.0 + mean_y.abs()));
        let (sd_y, p) = if degenerate { (0.0, 1) } else { (sd_y, config.basis_degree + 1) };
        let mut node = NodeFit { mean_y, sd_y, m_coef: vec![], u_coef: vec![], residual_rms: 0.0, min_m: f64::INFINITY, max_u: 0.0 };
        let mut phi = vec![0.0; np * p];
        for j in 0..np {
            node.basis(ys[j], &mut phi[j * p..(j + 1) * p]);
        }
        let mut gram = vec![0.0; p * p];
        for a in 0..p {
            for b in 0..=a {
                let g = pairwise_sum_by(np, &|j| phi[j * p + a] * phi[j * p + b]) / np as f64;
                gram[a * p + b] = g;
                gram[b * p + a] = g;
            }
            if a > 0 {
                gram[a * p + a] += RIDGE;
            }
        }
        let chol = cholesky(&gram, p).ok_or(Error::SingularRegression { node: i, degree: config.basis_degree })?;

        node.m_coef = fit(&phi, p, &m_next, &chol);
        let e: Vec<f64> = (0..np).map(|j| NodeFit::eval(&node.m_coef, &phi[j * p..(j + 1) * p])).collect();
        let resid: Vec<f64> = (0..np).map(|j| m_next[j] - e[j]).collect();
        node.residual_rms = sqrt(pairwise_sum_by(np, &|j| resid[j] * resid[j]) / np as f64);
        node.u_coef = (0..d)
            .map(|k| {
                let b: Vec<f64> = (0..np).map(|j| resid[j] * paths.dw(j, i)[k]).collect();
                fit(&phi, p, &b, &chol).into_iter().map(|x| x / dt).collect()
            })
            .collect();

        let solved = map_indexed(np, |j| {
            let ph = &phi[j * p..(j + 1) * p];
            let u: Vec<f64> = node.u_coef.iter().map(|c| NodeFit::eval(c, ph)).collect();
            let mut buf = vec![0.0; d];
            let m = driver.implicit(e[j], &u, rate[i], rho[i], paths.theta(j, i), dt, i, &mut buf)?;
            let umax = u.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            Ok((m, umax))
        });
        for (j, s) in solved.into_iter().enumerate() {
            let (m, umax) = s?;
            if m < floor {
                floor_binding += 1;
            }
            node.min_m = node.min_m.min(m);
            node.max_u = node.max_u.max(umax);
            m_next[j] = m;
        }
        fits[i] = node;
    }
    let diagnostics = BsdeDiagnostics {
        min_m: fits.iter().map(|f| f.min_m).fold(1.0, f64::min),
        max_abs_u: fits.iter().map(|f| f.max_u).fold(0.0, f64::max),
        floor_binding,
        max_residual_rms: fits.iter().map(|f| f.residual_rms).fold(0.0, f64::max),
    };
    Ok(BsdeSolution { model: model.clone(), cone: cone.clone(), grid, mu1, floor, rate, rho, fits, n_train: np, diagnostics })
}

impl BsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn fits(&self) -> &[NodeFit] {
        &self.fits
    }

    pub fn rho(&self, i: usize) -> f64 {
        self.rho[i]
    }

    pub fn model(&self) -> &FactorThetaModel {
        &self.model
    }

    pub fn floor_binds(&self) -> bool {
        self.diagnostics.floor_binding > 0
    }

    fn phi(&self, i: usize, y: f64) -> Vec<f64> {
        let f = &self.fits[i];
        let mut phi = vec![0.0; f.m_coef.len()];
        f.basis(y, &mut phi);
        phi
    }

    /// `U(t_i, y)` for `i < n`.
    pub fn u_at(&self, i: usize, y: f64) -> Vec<f64> {
        let phi = self.phi(i, y);
        self.fits[i].u_coef.iter().map(|c| NodeFit::eval(c, &phi)).collect()
    }

    /// `M(t_i, y)`: the implicit step evaluated at `y`; exactly 1 at `T`.
    pub fn m_at(&self, i: usize, y: f64) -> Result<f64> {
        if i >= self.grid.n_steps() {
            return Ok(1.0);
        }
        let phi = self.phi(i, y);
        let e = NodeFit::eval(&self.fits[i].m_coef, &phi);
        let u = self.u_at(i, y);
        let mut theta = vec![0.0; self.model.dim()];
        self.model.theta_of(y, &mut theta);
        let mut buf = vec![0.0; theta.len()];
        self.driver().implicit(e, &u, self.rate[i], self.rho[i], &theta, self.grid.dt(), i, &mut buf)
    }

    fn driver(&self) -> Driver<'_> {
        Driver { cone: &self.cone, mu1: self.mu1, floor: self.floor }
    }

    /// Increment residuals `M_{i+1} − M_i + Δt f(M_i, U_i) − U_i'ΔW_i` on
    /// fresh factor paths; returns `(mean, standard error)` per cell.
    ///
    /// The residual equals `M_{i+1} − Ê[M_{i+1} | Y_i] − U_i'ΔW_i`, so its
    /// mean carries the sampling error of the fitted conditional mean. The
    /// standard error therefore adds `Var(M_{i+1} − Ê[M_{i+1} | Y_i]) / n_train`
    /// to the check-sample term.
    pub fn martingale_check(&self, n_paths: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
        if n_paths < 2 {
            return Err(Error::invalid("n_paths", "must be at least 2"));
        }
        let paths = check_paths(&self.model, &self.grid, n_paths, seed)?;
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let d = self.model.dim();
        let rows = map_indexed(n_paths, |j| -> Result<Vec<(f64, f64)>> {
            let mut buf = vec![0.0; d];
            let mut out = Vec::with_capacity(n);
            let mut m_i = self.m_at(0, paths.y(j, 0))?;
            for i in 0..n {
                let y = paths.y(j, i);
                let u = self.u_at(i, y);
                let m_next = self.m_at(i + 1, paths.y(j, i + 1))?;
                let f = self.driver().f(m_i, &u, self.rate[i], self.rho[i], paths.theta(j, i), &mut buf);
                let innovation = m_next - m_i + dt * f;
                out.push((innovation - dot(&u, paths.dw(j, i)), innovation));
                m_i = m_next;
            }
            Ok(out)
        });
        let rows: Vec<Vec<(f64, f64)>> = rows.into_iter().collect::<Result<_>>()?;
        Ok((0..n)
            .map(|i| {
                let (m, v) = mean_var(&rows.iter().map(|r| r[i].0).collect::<Vec<_>>());
                let (_, v_fit) = mean_var(&rows.iter().map(|r| r[i].1).collect::<Vec<_>>());
                (m, sqrt(v / n_paths as f64 + v_fit / self.n_train as f64))
            })
            .collect())
    }
}

/// Factor paths for out-of-sample checks, on streams disjoint from the solver's.
fn check_paths(model: &FactorThetaModel, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<FactorPaths> {
    sample_factor_paths_for(model, grid, n_paths, seed, Purpose::Check)
}

/// The deterministic coefficients traced by the factor when `ν = 0`.
pub fn deterministic_limit(model: &FactorThetaModel, grid: &TimeGrid) -> Result<DeterministicCoefficients> {
    if model.nu != 0.0 {
        return Err(Error::invalid("nu", "the deterministic limit needs nu = 0"));
    }
    model.check_grid(grid)?;
    let n = grid.n_steps();
    let d = model.dim();
    let zero = vec![0.0; d];
    let mut y = model.y0;
    let mut theta = Vec::with_capacity(n);
    for _ in 0..n {
        let mut th = vec![0.0; d];
        model.theta_of(y, &mut th);
        theta.push(th);
        y = model.advance(y, grid.dt(), &zero);
    }
    DeterministicCoefficients::new(*grid, model.rate_cells(grid), theta, CoefficientBounds { r_max: f64::INFINITY, theta_max: f64::INFINITY })
}

/// State feedback `u = α(t, Y_t) X` with `α = Proj_K(M⁻¹(ρμ₁θ − U))`.
#[derive(Debug)]
pub struct StateFeedback {
    solution: BsdeSolution,
    clamped: AtomicUsize,
}

impl StateFeedback {
    pub fn solution(&self) -> &BsdeSolution {
        &self.solution
    }

    /// Evaluations where `M(t, y)` fell below the floor and was clamped.
    pub fn clamped(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    pub(crate) fn check_compatible(&self, model: &FactorThetaModel, grid: &TimeGrid) -> Result<()> {
        if model != &self.solution.model {
            return Err(Error::invalid("model", "state feedback was solved for a different factor model"));
        }
        if grid != &self.solution.grid {
            return Err(Error::GridMismatch("state feedback and simulation use different grids".into()));
        }
        Ok(())
    }

    /// `α(t_i, y)` given `θ(y)`, written into `out`.
    pub fn alpha(&self, i: usize, y: f64, theta: &[f64], out: &mut [f64]) {
        let s = &self.solution;
        let m = match s.m_at(i, y) {
            Ok(m) => m,
            Err(_) => s.floor,
        };
        let m = if m < s.floor {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            s.floor
        } else {
            m
        };
        let u = s.u_at(i, y);
        for k in 0..out.len() {
            out[k] = (s.rho[i] * s.mu1 * theta[k] - u[k]) / m;
        }
        let p = s.cone.project(out).expect("dimensions checked at construction");
        out.copy_from_slice(&p);
    }
}

/// The equilibrium feedback map of a solved BSDE.
pub fn equilibrium_policy_random(solution: &BsdeSolution) -> StateFeedback {
    StateFeedback { solution: solution.clone(), clamped: AtomicUsize::new(0) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{compute_m, solve_equilibrium};
    use crate::market::{Objective, OuParams, StepSchedule};

    fn model(r: f64, nu: f64, kappa: f64) -> FactorThetaModel {
        FactorThetaModel::new(
            1.0,
            StepSchedule::scalar(&[(0.0, r)]).unwrap(),
            OuParams { kappa, mean: 0.0, nu, y0: 0.0 },
            0,
            vec![1.0],
            vec![1.0],
            CoefficientBounds::default(),
        )
        .unwrap()
    }

    #[test]
    fn floor_examples() {
        assert_eq!(positivity_floor(&model(0.0, 0.2, 1.0), 1.0).unwrap(), 1.0);
        assert!((positivity_floor(&model(0.1, 0.2, 1.0), 1.0).unwrap() - exp(-0.2)).abs() < 1e-15);
        assert!(positivity_floor(&model(0.1, 0.2, 1.0), -1.0).is_err());
    }

    #[test]
    fn deterministic_limit_matches_closed_form() {
        let m = model(0.05, 0.0, 0.0);
        let cone = ConeSpec::nonnegative_orthant(1).unwrap();
        let cfg = BsdeConfig::new(1000, 50, 3, 1).unwrap();
        let sol = solve_quadratic_bsde(&m, &cone, 1.0, &cfg).unwrap();
        let exact = compute_m(&deterministic_limit(&m, sol.grid()).unwrap(), &cone, 1.0).unwrap();
        for (i, e) in exact.iter().enumerate() {
            let mi = sol.m_at(i, 0.0).unwrap();
            assert!((mi / e - 1.0).abs() < 1e-2, "node {i}: {mi} vs {e}");
        }
        assert!(sol.diagnostics.max_abs_u < 1e-10);
        assert_eq!(sol.m_at(50, 3.0).unwrap(), 1.0);
        assert!(!sol.floor_binds());
    }

    #[test]
    fn benchmark_limit_is_exact() {
        let m = model(0.0, 0.0, 0.0);
        let cone = ConeSpec::nonnegative_orthant(1).unwrap();
        let sol = solve_quadratic_bsde(&m, &cone, 1.0, &BsdeConfig::new(1000, 10, 2, 1).unwrap()).unwrap();
        for i in 0..=10 {
            let mi = sol.m_at(i, 0.0).unwrap();
            assert!((mi - (2.0 - sol.grid().node(i))).abs() < 1e-12, "node {i}: {mi}");
        }
        let alpha = equilibrium_policy_random(&sol);
        let mut out = [0.0];
        alpha.alpha(0, 0.0, &[1.0], &mut out);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let eq = solve_equilibrium(&deterministic_limit(&m, &grid).unwrap(), &cone, &Objective::new(1.0, 0.0, 1.0).unwrap()).unwrap();
        assert!((out[0] - eq.node_feedback[0][0]).abs() < 1e-12);
    }

    #[test]
    fn null_objective_gives_unit_m() {
        let m = model(0.0, 0.3, 1.0);
        let cone = ConeSpec::full_space(1).unwrap();
        let sol = solve_quadratic_bsde(&m, &cone, 0.0, &BsdeConfig::new(2000, 20, 3, 4).unwrap()).unwrap();
        for i in 0..=20 {
            for y in [-0.5, 0.0, 0.5] {
                assert!((sol.m_at(i, y).unwrap() - 1.0).abs() < 1e-2);
                if i < 20 {
                    assert!(sol.u_at(i, y)[0].abs() < 1e-2);
                }
            }
        }
    }

    #[test]
    fn random_case_is_reproducible_and_alpha_in_cone() {
        let m = model(0.02, 0.2, 1.0);
        let cone = ConeSpec::nonnegative_orthant(1).unwrap();
        let cfg = BsdeConfig::new(2000, 20, 3, 9).unwrap();
        let a = solve_quadratic_bsde(&m, &cone, 1.0, &cfg).unwrap();
        let b = solve_quadratic_bsde(&m, &cone, 1.0, &cfg).unwrap();
        assert_eq!(a, b);
        let alpha = equilibrium_policy_random(&a);
        let mut th = [0.0];
        let mut out = [0.0];
        for y in [-3.0, -1.0, 0.0, 2.0] {
            m.theta_of(y, &mut th);
            alpha.alpha(5, y, &th, &mut out);
            assert!(out[0] >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(BsdeConfig::new(999, 10, 3, 0).is_err());
        assert!(BsdeConfig::new(1000, 9, 3, 0).is_err());
        assert!(BsdeConfig::new(1000, 10, 0, 0).is_err());
        assert!(BsdeConfig::new(1000, 10, 6, 0).is_err());
    }
}
