//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//!
//! [market]
//! horizon = 1.0
//! steps = 500
//! rate = [[0.0, 0.0]]          # (breakpoint, r) rows
//! theta = [[0.0, 1.0]]         # (breakpoint, θ_1, ..., θ_l) rows; or [market.factor]
//!
//! [objective]
//! mu1 = 1.0
//! mu2 = 0.0
//! x0 = 1.0
//!
//! [cone]
//! kind = "orthant"             # full | orthant | ray | generated
//! dim = 1
//! ```
//!
//! Every section of `[numerics]` is optional and falls back to the defaults
//! below. The resolved configuration (defaults filled in, command-line
//! overrides applied) is written back as `resolved_config.toml`.

use std::path::Path;

use conemv_core::bsde::BsdeConfig;
use conemv_core::cone::ConeSpec;
use conemv_core::market::{CoefficientBounds, DeterministicCoefficients, FactorThetaModel, Objective, OuParams, StepSchedule, TimeGrid};
use conemv_core::montecarlo::{Scheme, SimulationConfig, SpikeConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: String,
    pub market: MarketSection,
    pub objective: ObjectiveSection,
    pub cone: ConeSection,
    #[serde(default)]
    pub numerics: NumericsSection,
}

fn default_output() -> String {
    "conemv-out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub horizon: f64,
    pub steps: usize,
    pub rate: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<FactorSection>,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
}

fn default_r_max() -> f64 {
    CoefficientBounds::default().r_max
}

fn default_theta_max() -> f64 {
    CoefficientBounds::default().theta_max
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSection {
    pub kappa: f64,
    pub mean: f64,
    pub nu: f64,
    pub y0: f64,
    #[serde(default)]
    pub brownian_index: usize,
    pub theta_base: Vec<f64>,
    pub theta_loading: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub mu1: f64,
    #[serde(default)]
    pub mu2: f64,
    pub x0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConeKindName {
    Full,
    Orthant,
    Ray,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeSection {
    pub kind: ConeKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsSection {
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub bsde: BsdeSection,
    #[serde(default)]
    pub spike: SpikeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub paths: usize,
    pub scheme: String,
    pub antithetic: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { paths: 100_000, scheme: "log-euler".into(), antithetic: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsdeSection {
    pub paths: usize,
    pub steps: usize,
    pub degree: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
}

impl Default for BsdeSection {
    fn default() -> Self {
        Self { paths: 10_000, steps: 50, degree: 3, floor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpikeSection {
    pub outer: usize,
    pub inner: usize,
    pub substeps: usize,
    pub t: Vec<f64>,
    pub eps: Vec<f64>,
}

impl Default for SpikeSection {
    fn default() -> Self {
        let d = SpikeConfig::new(0);
        Self { outer: d.n_outer, inner: d.n_inner, substeps: d.substeps, t: vec![0.0, 0.25, 0.5, 0.75], eps: vec![0.02, 0.01] }
    }
}

/// The market in core types.
pub enum MarketModel {
    Deterministic(DeterministicCoefficients),
    Factor { model: FactorThetaModel, grid: TimeGrid },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Usage(format!("seed must be at most {}", i64::MAX)));
        }
        match (&self.market.theta, &self.market.factor) {
            (Some(_), Some(_)) => return Err(CliError::Usage("market: give either `theta` or `[market.factor]`, not both".into())),
            (None, None) => return Err(CliError::Usage("market: missing `theta` (or a `[market.factor]` section)".into())),
            _ => {}
        }
        self.scheme()?;
        let cone = self.cone()?;
        self.objective()?;
        let dim = match self.market_model()? {
            MarketModel::Deterministic(c) => c.dim(),
            MarketModel::Factor { model, .. } => model.dim(),
        };
        if dim != cone.dim() {
            return Err(CliError::Usage(format!("cone dimension {} differs from the number of risky assets {dim}", cone.dim())));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::new(self.market.horizon, self.market.steps)?)
    }

    pub fn bounds(&self) -> CoefficientBounds {
        CoefficientBounds { r_max: self.market.r_max, theta_max: self.market.theta_max }
    }

    pub fn objective(&self) -> Result<Objective, CliError> {
        let o = &self.objective;
        Ok(Objective::new(o.mu1, o.mu2, o.x0)?)
    }

    pub fn cone(&self) -> Result<ConeSpec, CliError> {
        let c = &self.cone;
        let missing = |key: &str| CliError::Usage(format!("cone: kind {:?} needs `{key}`", c.kind));
        Ok(match c.kind {
            ConeKindName::Full => ConeSpec::full_space(c.dim.ok_or_else(|| missing("dim"))?)?,
            ConeKindName::Orthant => ConeSpec::nonnegative_orthant(c.dim.ok_or_else(|| missing("dim"))?)?,
            ConeKindName::Ray => ConeSpec::ray(c.direction.clone().ok_or_else(|| missing("direction"))?)?,
            ConeKindName::Generated => ConeSpec::finitely_generated(c.generators.clone().ok_or_else(|| missing("generators"))?)?,
        })
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        Ok(self.numerics.simulation.scheme.parse()?)
    }

    fn rate_schedule(&self) -> Result<StepSchedule, CliError> {
        let rows = self
            .market
            .rate
            .iter()
            .map(|r| match r.as_slice() {
                [t, v] => Ok((*t, *v)),
                _ => Err(CliError::Usage("market.rate rows must be [t, r]".into())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(StepSchedule::scalar(&rows)?)
    }

    pub fn market_model(&self) -> Result<MarketModel, CliError> {
        let grid = self.grid()?;
        let rate = self.rate_schedule()?;
        if let Some(f) = &self.market.factor {
            let model = FactorThetaModel::new(
                self.market.horizon,
                rate,
                OuParams { kappa: f.kappa, mean: f.mean, nu: f.nu, y0: f.y0 },
                f.brownian_index,
                f.theta_base.clone(),
                f.theta_loading.clone(),
                self.bounds(),
            )?;
            return Ok(MarketModel::Factor { model, grid });
        }
        let rows = self.market.theta.as_ref().expect("validated");
        let theta = rows
            .iter()
            .map(|r| match r.split_first() {
                Some((t, v)) if !v.is_empty() => Ok((*t, v.to_vec())),
                _ => Err(CliError::Usage("market.theta rows must be [t, theta_1, ...]".into())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let theta = StepSchedule::new(theta)?;
        Ok(MarketModel::Deterministic(DeterministicCoefficients::from_schedules(grid, &rate, &theta, self.bounds())?))
    }

    pub fn deterministic(&self, command: &str) -> Result<DeterministicCoefficients, CliError> {
        match self.market_model()? {
            MarketModel::Deterministic(c) => Ok(c),
            MarketModel::Factor { .. } => {
                Err(CliError::Usage(format!("`{command}` needs a deterministic theta; this config has a factor-driven theta, use `bsde` instead")))
            }
        }
    }

    pub fn simulation(&self) -> Result<SimulationConfig, CliError> {
        let s = &self.numerics.simulation;
        let cfg = SimulationConfig { n_paths: s.paths, n_steps: self.market.steps, seed: self.seed, scheme: self.scheme()?, antithetic: s.antithetic };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bsde(&self, steps: usize) -> Result<BsdeConfig, CliError> {
        let b = &self.numerics.bsde;
        let cfg = BsdeConfig { n_paths: b.paths, n_steps: steps, basis_degree: b.degree, floor_c: b.floor, seed: self.seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn spike(&self) -> SpikeConfig {
        let s = &self.numerics.spike;
        SpikeConfig { n_outer: s.outer, n_inner: s.inner, substeps: s.substeps, seed: self.seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BENCHMARK: &str = r#"
        seed = 3
        [market]
        horizon = 1.0
        steps = 100
        rate = [[0.0, 0.0]]
        theta = [[0.0, 1.0]]
        [objective]
        mu1 = 1.0
        x0 = 1.0
        [cone]
        kind = "orthant"
        dim = 1
    "#;

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse(BENCHMARK).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(cfg.numerics.spike.eps, vec![0.02, 0.01]);
    }

    #[test]
    fn factor_config_round_trips() {
        let text = BENCHMARK
            .replace("theta = [[0.0, 1.0]]", "[market.factor]\nkappa = 1.0\nmean = 0.0\nnu = 0.2\ny0 = 0.1\ntheta_base = [1.0]\ntheta_loading = [0.5]");
        let cfg = RunConfig::parse(&text).unwrap();
        assert!(cfg.market.factor.is_some());
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let err = RunConfig::parse(&BENCHMARK.replace("x0 = 1.0", "")).unwrap_err().to_string();
        assert!(err.contains("x0"), "{err}");
        let err = RunConfig::parse(&BENCHMARK.replace("mu1 = 1.0", "mu1 = 1.0\nmu3 = 2.0")).unwrap_err().to_string();
        assert!(err.contains("mu3"), "{err}");
        let err = RunConfig::parse(&BENCHMARK.replace("dim = 1", "")).unwrap_err().to_string();
        assert!(err.contains("dim"), "{err}");
    }

    #[test]
    fn cone_dimension_must_match_theta() {
        let err = RunConfig::parse(&BENCHMARK.replace("dim = 1", "dim = 2")).unwrap_err().to_string();
        assert!(err.contains("dimension"), "{err}");
    }
}
