//! Time grid, coefficient paths and the elementary discount functionals.
//!
//! Coefficients are piecewise constant on grid cells `[t_i, t_{i+1})`, so every
//! time integral below is an exact finite sum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cone::ConeSpec;
use crate::math::{exp, norm, norm_sq, sqrt};
use crate::parallel::map_indexed;
use crate::rng::{PathRng, Purpose};
use crate::{Error, Result};

/// Uniform grid `t_i = i T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid("horizon", "must be positive and finite"));
        }
        if n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be at least 1"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node time; the last node is `T` exactly.
    pub fn node(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }

    /// Index of the node at time `t`, if `t` is a node up to rounding.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let i = libm::round(x);
        if i < 0.0 || i > self.n_steps as f64 || (x - i).abs() > 1e-9 * (1.0 + x.abs()) {
            return None;
        }
        Some(i as usize)
    }

    /// Index of the cell containing `s`; `T` belongs to the last cell.
    pub fn cell_index(&self, s: f64) -> usize {
        let i = libm::floor(s / self.dt()) as usize;
        i.min(self.n_steps - 1)
    }

    pub(crate) fn check_time(&self, s: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&s) {
            return Err(Error::TimeOutOfRange { time: s, horizon: self.horizon });
        }
        Ok(())
    }
}

/// Right-continuous step function given by `(time, value)` breakpoints; the
/// first breakpoint is at `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl StepSchedule {
    pub fn new(breakpoints: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        let Some((t0, v0)) = breakpoints.first() else {
            return Err(Error::invalid("schedule", "needs at least one breakpoint"));
        };
        if *t0 != 0.0 {
            return Err(Error::invalid("schedule", "first breakpoint must be at time 0"));
        }
        let dim = v0.len();
        if dim == 0 {
            return Err(Error::invalid("schedule", "values must be nonempty"));
        }
        for w in breakpoints.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid("schedule", "breakpoint times must be strictly increasing"));
            }
        }
        for (_, v) in &breakpoints {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("schedule", "values must be finite"));
            }
        }
        let (times, values) = breakpoints.into_iter().unzip();
        Ok(Self { times, values })
    }

    pub fn constant(value: Vec<f64>) -> Result<Self> {
        Self::new(vec![(0.0, value)])
    }

    pub fn scalar(breakpoints: &[(f64, f64)]) -> Result<Self> {
        Self::new(breakpoints.iter().map(|&(t, v)| (t, vec![v])).collect())
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.times.iter().copied().zip(self.values.iter().map(Vec::as_slice))
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        let k = self.times.partition_point(|&s| s <= t).max(1) - 1;
        &self.values[k]
    }

    /// Cell values sampled at the left endpoint of each grid cell.
    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<Vec<f64>> {
        (0..grid.n_steps()).map(|i| self.value_at(grid.node(i)).to_vec()).collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| norm(v)).fold(0.0, f64::max)
    }
}

/// Bounds the coefficients must respect (`|r| ≤ r_max`, `|θ| ≤ theta_max`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientBounds {
    pub r_max: f64,
    pub theta_max: f64,
}

impl Default for CoefficientBounds {
    fn default() -> Self {
        Self { r_max: 1.0, theta_max: 10.0 }
    }
}

/// Deterministic interest rate and risk premium, piecewise constant on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicCoefficients {
    grid: TimeGrid,
    rate: Vec<f64>,
    theta: Vec<Vec<f64>>,
    /// `∫_0^{t_i} r` at each node.
    head: Vec<f64>,
}

impl DeterministicCoefficients {
    pub fn new(grid: TimeGrid, rate: Vec<f64>, theta: Vec<Vec<f64>>, bounds: CoefficientBounds) -> Result<Self> {
        let n = grid.n_steps();
        if rate.len() != n {
            return Err(Error::GridMismatch(format!("{} rate cells for {n} grid cells", rate.len())));
        }
        if theta.len() != n {
            return Err(Error::GridMismatch(format!("{} theta cells for {n} grid cells", theta.len())));
        }
        let dim = theta[0].len();
        if dim == 0 {
            return Err(Error::invalid("theta", "risk premium must have at least one component"));
        }
        for th in &theta {
            if th.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: th.len() });
            }
            if th.iter().any(|x| !x.is_finite()) || norm(th) > bounds.theta_max {
                return Err(Error::invalid("theta", format!("|theta| must be finite and at most {}", bounds.theta_max)));
            }
        }
        if rate.iter().any(|r| !r.is_finite() || r.abs() > bounds.r_max) {
            return Err(Error::invalid("rate", format!("|r| must be finite and at most {}", bounds.r_max)));
        }
        let dt = grid.dt();
        let mut head = Vec::with_capacity(n + 1);
        head.push(0.0);
        for r in &rate {
            head.push(head.last().unwrap() + r * dt);
        }
        Ok(Self { grid, rate, theta, head })
    }

    pub fn from_schedules(grid: TimeGrid, rate: &StepSchedule, theta: &StepSchedule, bounds: CoefficientBounds) -> Result<Self> {
        if rate.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, found: rate.dim() });
        }
        let r = rate.on_grid(&grid).into_iter().map(|v| v[0]).collect();
        Self::new(grid, r, theta.on_grid(&grid), bounds)
    }

    /// Constant `r` and `θ` on every cell.
    pub fn constant(grid: TimeGrid, rate: f64, theta: Vec<f64>) -> Result<Self> {
        let n = grid.n_steps();
        Self::new(grid, vec![rate; n], vec![theta; n], CoefficientBounds::default())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.theta[0].len()
    }

    pub fn rate(&self) -> &[f64] {
        &self.rate
    }

    pub fn theta(&self) -> &[Vec<f64>] {
        &self.theta
    }

    fn head_at(&self, s: f64) -> f64 {
        if s >= self.grid.horizon() {
            return self.head[self.grid.n_steps()];
        }
        let k = self.grid.cell_index(s);
        self.head[k] + self.rate[k] * (s - self.grid.node(k))
    }

    /// `∫_s^u r_v dv` for `0 ≤ s ≤ u ≤ T`.
    pub fn rate_integral(&self, s: f64, u: f64) -> Result<f64> {
        self.grid.check_time(s)?;
        self.grid.check_time(u)?;
        Ok(self.head_at(u) - self.head_at(s))
    }

    /// `∫_{t_i}^T r` at node `i`.
    pub fn rate_tail(&self, i: usize) -> f64 {
        self.head[self.grid.n_steps()] - self.head[i]
    }

    /// `∫_{t_i}^{t_j} r` between nodes.
    pub fn rate_between(&self, i: usize, j: usize) -> f64 {
        self.head[j] - self.head[i]
    }

    /// `ρ_s = exp(∫_s^T r_v dv)`.
    pub fn rho(&self, s: f64) -> Result<f64> {
        self.grid.check_time(s)?;
        if s == self.grid.horizon() {
            return Ok(1.0);
        }
        Ok(exp(self.head[self.grid.n_steps()] - self.head_at(s)))
    }

    /// `ρ` at node `i`.
    pub fn rho_node(&self, i: usize) -> f64 {
        if i >= self.grid.n_steps() {
            return 1.0;
        }
        exp(self.rate_tail(i))
    }

    /// `Proj_K(θ)` on every cell.
    pub fn projected_premium(&self, cone: &ConeSpec) -> Result<Vec<Vec<f64>>> {
        self.theta.iter().map(|th| cone.project(th)).collect()
    }

    /// `∫_s^T |Proj_K(θ_v)|² dv`.
    pub fn integral_proj_theta_sq(&self, cone: &ConeSpec, s: f64) -> Result<f64> {
        self.grid.check_time(s)?;
        let n = self.grid.n_steps();
        if s >= self.grid.horizon() {
            return Ok(0.0);
        }
        let k = self.grid.cell_index(s);
        let dt = self.grid.dt();
        let first = norm_sq(&cone.project(&self.theta[k])?) * (self.grid.node(k + 1) - s);
        let mut rest = 0.0;
        for i in k + 1..n {
            rest += norm_sq(&cone.project(&self.theta[i])?) * dt;
        }
        Ok(first + rest)
    }
}

/// Initial wealth and the risk-aversion coefficients.
///
/// The time-`t` objective uses `γ_t(x) = μ₁ x`; `μ₂` enters only the
/// precommitted problem, where `γ(x₀) = μ₁ x₀ + μ₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mu1: f64,
    pub mu2: f64,
    pub x0: f64,
}

impl Objective {
    pub fn new(mu1: f64, mu2: f64, x0: f64) -> Result<Self> {
        if !mu1.is_finite() || !mu2.is_finite() {
            return Err(Error::invalid("mu", "risk-aversion coefficients must be finite"));
        }
        if !(x0 > 0.0) || !x0.is_finite() {
            return Err(Error::invalid("x0", "initial wealth must be positive"));
        }
        Ok(Self { mu1, mu2, x0 })
    }

    /// `μ₁ x₀ + μ₂`.
    pub fn gamma(&self) -> f64 {
        self.mu1 * self.x0 + self.mu2
    }
}

/// Risk premium driven by a scalar Ornstein–Uhlenbeck factor
/// `dY = κ(m − Y) dt + ν dB`, with `B` one coordinate of the driving Brownian
/// motion and `θ_t = clip(θ̄ + β Y_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorThetaModel {
    horizon: f64,
    rate: StepSchedule,
    pub kappa: f64,
    pub mean: f64,
    pub nu: f64,
    pub y0: f64,
    brownian_index: usize,
    theta_base: Vec<f64>,
    theta_loading: Vec<f64>,
    theta_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    pub kappa: f64,
    pub mean: f64,
    pub nu: f64,
    pub y0: f64,
}

impl FactorThetaModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        horizon: f64,
        rate: StepSchedule,
        ou: OuParams,
        brownian_index: usize,
        theta_base: Vec<f64>,
        theta_loading: Vec<f64>,
        bounds: CoefficientBounds,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid("horizon", "must be positive and finite"));
        }
        if rate.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, found: rate.dim() });
        }
        if rate.max_norm() > bounds.r_max {
            return Err(Error::invalid("rate", format!("|r| must be at most {}", bounds.r_max)));
        }
        if !(ou.kappa >= 0.0) || !(ou.nu >= 0.0) || !ou.mean.is_finite() || !ou.y0.is_finite() {
            return Err(Error::invalid("factor", "need kappa >= 0, nu >= 0 and finite mean, y0"));
        }
        let dim = theta_base.len();
        if dim == 0 {
            return Err(Error::invalid("theta_base", "must be nonempty"));
        }
        if theta_loading.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: theta_loading.len() });
        }
        if brownian_index >= dim {
            return Err(Error::invalid("brownian_index", format!("must be below the Brownian dimension {dim}")));
        }
        if !(bounds.theta_max > 0.0) {
            return Err(Error::invalid("theta_max", "must be positive"));
        }
        Ok(Self { horizon, rate, kappa: ou.kappa, mean: ou.mean, nu: ou.nu, y0: ou.y0, brownian_index, theta_base, theta_loading, theta_max: bounds.theta_max })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Brownian dimension, equal to the number of risky assets.
    pub fn dim(&self) -> usize {
        self.theta_base.len()
    }

    pub fn brownian_index(&self) -> usize {
        self.brownian_index
    }

    pub fn rate_schedule(&self) -> &StepSchedule {
        &self.rate
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// `max |r_t|`.
    pub fn rate_bound(&self) -> f64 {
        self.rate.max_norm()
    }

    pub fn theta_base(&self) -> &[f64] {
        &self.theta_base
    }

    pub fn theta_loading(&self) -> &[f64] {
        &self.theta_loading
    }

    /// Risk premium for factor level `y`: component-wise clamp to
    /// `[−Θ_max, Θ_max]`, then radial rescaling so that `|θ| ≤ Θ_max`.
    pub fn theta_of(&self, y: f64, out: &mut [f64]) {
        let cap = self.theta_max;
        for ((o, b), l) in out.iter_mut().zip(&self.theta_base).zip(&self.theta_loading) {
            *o = (b + l * y).clamp(-cap, cap);
        }
        let n = norm(out);
        if n > cap {
            let s = cap / n;
            out.iter_mut().for_each(|o| *o *= s);
        }
    }

    /// One Euler–Maruyama step of the factor given the Brownian increment vector.
    #[inline]
    pub fn advance(&self, y: f64, dt: f64, dw: &[f64]) -> f64 {
        y + self.kappa * (self.mean - y) * dt + self.nu * dw[self.brownian_index]
    }

    /// Rate cells on `grid`.
    pub fn rate_cells(&self, grid: &TimeGrid) -> Vec<f64> {
        self.rate.on_grid(grid).into_iter().map(|v| v[0]).collect()
    }

    /// The deterministic coefficients obtained by freezing the factor at `y0`
    /// (the `ν = 0, κ = 0` limit).
    pub fn frozen(&self, grid: TimeGrid) -> Result<DeterministicCoefficients> {
        let mut th = vec![0.0; self.dim()];
        self.theta_of(self.y0, &mut th);
        let n = grid.n_steps();
        DeterministicCoefficients::new(grid, self.rate_cells(&grid), vec![th; n], CoefficientBounds { r_max: f64::INFINITY, theta_max: f64::INFINITY })
    }

    pub(crate) fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if (grid.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::GridMismatch(format!("grid horizon {} differs from model horizon {}", grid.horizon(), self.horizon)));
        }
        Ok(())
    }
}

/// Simulated factor paths with the Brownian increments that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPaths {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    y: Vec<f64>,
    theta: Vec<f64>,
    dw: Vec<f64>,
}

impl FactorPaths {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Factor level of path `p` at node `i`.
    pub fn y(&self, p: usize, i: usize) -> f64 {
        self.y[p * (self.grid.n_steps() + 1) + i]
    }

    /// Risk premium of path `p` at node `i`.
    pub fn theta(&self, p: usize, i: usize) -> &[f64] {
        let k = (p * (self.grid.n_steps() + 1) + i) * self.dim;
        &self.theta[k..k + self.dim]
    }

    /// Brownian increment of path `p` over cell `i`.
    pub fn dw(&self, p: usize, i: usize) -> &[f64] {
        let k = (p * self.grid.n_steps() + i) * self.dim;
        &self.dw[k..k + self.dim]
    }
}

/// Draws the Brownian increments of one path from `rng` and runs the factor
/// along them. Returns `(y at nodes, dw per cell)`.
pub(crate) fn factor_path(model: &FactorThetaModel, grid: &TimeGrid, rng: &mut PathRng) -> (Vec<f64>, Vec<f64>) {
    let n = grid.n_steps();
    let d = model.dim();
    let dt = grid.dt();
    let sdt = sqrt(dt);
    let mut y = Vec::with_capacity(n + 1);
    let mut dw = vec![0.0; n * d];
    y.push(model.y0);
    for i in 0..n {
        let inc = &mut dw[i * d..(i + 1) * d];
        rng.fill_normal(inc);
        inc.iter_mut().for_each(|z| *z *= sdt);
        let next = model.advance(y[i], dt, inc);
        y.push(next);
    }
    (y, dw)
}

/// Euler–Maruyama factor paths mapped to clipped risk-premium paths. Path `p`
/// uses the stream `(seed, p, Factor)`, so the output does not depend on the
/// number of workers.
pub fn sample_factor_paths(model: &FactorThetaModel, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<FactorPaths> {
    sample_factor_paths_for(model, grid, n_paths, seed, Purpose::Factor)
}

pub(crate) fn sample_factor_paths_for(model: &FactorThetaModel, grid: &TimeGrid, n_paths: usize, seed: u64, purpose: Purpose) -> Result<FactorPaths> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths", "must be at least 1"));
    }
    model.check_grid(grid)?;
    let n = grid.n_steps();
    let d = model.dim();
    let per_path = map_indexed(n_paths, |p| {
        let mut rng = PathRng::new(seed, p as u64, purpose);
        let (y, dw) = factor_path(model, grid, &mut rng);
        let mut theta = vec![0.0; (n + 1) * d];
        for (i, yi) in y.iter().enumerate() {
            model.theta_of(*yi, &mut theta[i * d..(i + 1) * d]);
        }
        (y, theta, dw)
    });
    let mut out = FactorPaths {
        grid: *grid,
        n_paths,
        dim: d,
        y: Vec::with_capacity(n_paths * (n + 1)),
        theta: Vec::with_capacity(n_paths * (n + 1) * d),
        dw: Vec::with_capacity(n_paths * n * d),
    };
    for (y, theta, dw) in per_path {
        out.y.extend(y);
        out.theta.extend(theta);
        out.dw.extend(dw);
    }
    Ok(out)
}
