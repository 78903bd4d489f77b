//! Experiment configuration: a TOML file, overridden field by field from the
//! command line, then validated before any work starts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wiener_density::bounds::{ConstantsProfile, RadiusRule};
use wiener_density::models;
use wiener_density::sde::ModelSpec;
use wiener_density::skeleton::ExitMonitoring;

/// A validation failure tied to a config field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        ConfigError { field: field.to_string(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    Thpos,
    ItoPos,
    ItoLb,
    Hormander,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { name: "gaussian1d".into(), params: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { horizon: 1.0, steps: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub n: usize,
    pub seed: u64,
    pub workers: usize,
    pub winsorize: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { n: 100_000, seed: 0, workers: 1, winsorize: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Constant control used by `skeleton`, `tube` and `ito-lb`.
    pub phi: Option<Vec<f64>>,
    /// Endpoint of the straight-line target used by `control`.
    pub target: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeConfig {
    pub eta: f64,
    pub monitoring: ExitMonitoring,
}

impl Default for TubeConfig {
    fn default() -> Self {
        TubeConfig { eta: 1.0, monitoring: ExitMonitoring::BrownianBridge }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionalConfig {
    /// State component used as `G` in `E(G | X_T = x)`.
    pub component: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    pub constants: Option<PathBuf>,
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_reference: usize,
    pub min_hits: u64,
    pub r: f64,
    pub delta: f64,
    pub deltas: Vec<f64>,
    pub eta: f64,
    pub c_phi_floor: f64,
    pub attain_tol: f64,
    pub lambda_star: f64,
    pub mu: f64,
    pub h: f64,
    pub y_lo: Vec<f64>,
    pub y_hi: Vec<f64>,
    pub y_grid: usize,
    pub waiver: bool,
    pub monitoring: ExitMonitoring,
    pub c_star: f64,
    pub radius: RadiusRule,
    pub box_radius: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            kind: PipelineKind::Thpos,
            constants: None,
            n_outer: 10_000,
            n_inner: 100,
            n_reference: 100_000,
            min_hits: 20,
            r: 1.0,
            delta: 0.05,
            deltas: vec![1.0, 0.5, 0.25, 0.1, 0.05],
            eta: 1.0,
            c_phi_floor: 0.5,
            attain_tol: 1e-6,
            lambda_star: 1.0,
            mu: 2.0,
            h: 0.1,
            y_lo: Vec::new(),
            y_hi: Vec::new(),
            y_grid: 5,
            waiver: false,
            monitoring: ExitMonitoring::BrownianBridge,
            c_star: 0.5,
            radius: RadiusRule::Fixed(1.0),
            box_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub eps: Vec<f64>,
    pub safety: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig { eps: vec![1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1], safety: 2.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub estimator: EstimatorConfig,
    /// Evaluation points: `x` for density estimates, `y` for lower bounds.
    pub points: Vec<Vec<f64>>,
    pub control: ControlConfig,
    pub tube: TubeConfig,
    pub conditional: ConditionalConfig,
    pub pipeline: PipelineConfig,
    pub calibrate: CalibrateConfig,
    /// Not part of the hashed configuration.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("config[{}..{}]", s.start, s.end)).unwrap_or_else(|| "config".into());
            ConfigError::new(&field, e.message().to_string())
        })
    }

    /// Loads the constants profile named in the config, or the literal
    /// defaults for dimension `d`.
    pub fn constants(&self, d: usize) -> Result<ConstantsProfile, ConfigError> {
        let Some(path) = &self.pipeline.constants else {
            return Ok(ConstantsProfile::literal(d));
        };
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("pipeline.constants", format!("{}: {e}", path.display())))?;
        let k: ConstantsProfile = serde_json::from_str(&text).map_err(|e| ConfigError::new("pipeline.constants", e.to_string()))?;
        k.check_dim(d).map_err(|e| ConfigError::new("pipeline.constants", e.to_string()))?;
        Ok(k)
    }

    /// Checks every field that does not need a pipeline run.
    pub fn validate(&self) -> Result<ModelSpec, ConfigError> {
        if !models::names().any(|n| n == self.model.name) {
            return Err(ConfigError::new(
                "model.name",
                format!("unknown model `{}`; known: {}", self.model.name, models::names().collect::<Vec<_>>().join(", ")),
            ));
        }
        let model = models::build(&self.model.name, &self.model.params).map_err(|e| ConfigError::new("model.params", e.to_string()))?;
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(ConfigError::new("grid.horizon", "must be positive and finite"));
        }
        if self.grid.steps == 0 {
            return Err(ConfigError::new("grid.steps", "must be at least 1"));
        }
        if self.estimator.n < 2 {
            return Err(ConfigError::new("estimator.n", "must be at least 2"));
        }
        if self.estimator.workers == 0 {
            return Err(ConfigError::new("estimator.workers", "must be at least 1"));
        }
        if let Some(q) = self.estimator.winsorize {
            if !(q > 0.5 && q < 1.0) {
                return Err(ConfigError::new("estimator.winsorize", "must lie in (0.5, 1)"));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.len() != model.d {
                return Err(ConfigError::new(&format!("points[{i}]"), format!("has {} coordinates, model `{}` has d = {}", p.len(), model.name, model.d)));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(ConfigError::new(&format!("points[{i}]"), "coordinates must be finite"));
            }
        }
        if let Some(phi) = &self.control.phi {
            if phi.len() != model.m {
                return Err(ConfigError::new("control.phi", format!("has {} components, model has m = {}", phi.len(), model.m)));
            }
        }
        if let Some(t) = &self.control.target {
            if t.len() != model.d {
                return Err(ConfigError::new("control.target", format!("has {} coordinates, model has d = {}", t.len(), model.d)));
            }
        }
        if !(self.tube.eta > 0.0) {
            return Err(ConfigError::new("tube.eta", "must be positive"));
        }
        if let Some(c) = self.conditional.component {
            if c >= model.dim() {
                return Err(ConfigError::new("conditional.component", format!("must be below the state dimension {}", model.dim())));
            }
        }
        let p = &self.pipeline;
        if p.n_outer < 2 || p.n_inner < 2 || p.n_reference < 2 {
            return Err(ConfigError::new("pipeline", "n_outer, n_inner and n_reference must be at least 2"));
        }
        if !(p.r > 0.0) {
            return Err(ConfigError::new("pipeline.r", "must be positive"));
        }
        if p.deltas.is_empty() || p.deltas.iter().any(|d| !(*d > 0.0 && *d <= self.grid.horizon)) {
            return Err(ConfigError::new("pipeline.deltas", "must be a nonempty list of lags in (0, T]"));
        }
        if !(p.delta > 0.0 && p.delta <= self.grid.horizon) {
            return Err(ConfigError::new("pipeline.delta", "must lie in (0, T]"));
        }
        if !(p.eta > 0.0) {
            return Err(ConfigError::new("pipeline.eta", "must be positive"));
        }
        if let RadiusRule::Fixed(r) = p.radius {
            if !(r > 0.0) {
                return Err(ConfigError::new("pipeline.radius", "fixed radius must be positive"));
            }
        }
        if self.calibrate.eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(ConfigError::new("calibrate.eps", "every eps must lie in (0, 1)"));
        }
        if !(self.calibrate.safety >= 1.0) {
            return Err(ConfigError::new("calibrate.safety", "must be at least 1"));
        }
        Ok(model)
    }
}

/// Parses `"0.5,-1"` into a point.
pub fn parse_point(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.validate().unwrap().name, "gaussian1d");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::parse(
            r#"
            points = [[0.0, 0.0]]
            [model]
            name = "kolmogorov"
            params = { sigma = 1.5 }
            [pipeline]
            kind = "hormander"
            radius = { fixed = 0.5 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.pipeline.kind, PipelineKind::Hormander);
        assert_eq!(cfg.pipeline.radius, RadiusRule::Fixed(0.5));
        assert!(cfg.validate().is_ok());
        let back = ExperimentConfig::parse(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        assert!(ExperimentConfig::parse("[grid]\nstepz = 3").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.points = vec![vec![0.0, 1.0]];
        assert_eq!(cfg.validate().unwrap_err().field, "points[0]");
        cfg.points.clear();
        cfg.model.name = "nope".into();
        assert_eq!(cfg.validate().unwrap_err().field, "model.name");
        cfg.model.name = "bm1d".into();
        cfg.grid.steps = 0;
        assert_eq!(cfg.validate().unwrap_err().field, "grid.steps");
    }

    #[test]
    fn points_parse() {
        assert_eq!(parse_point("0.5, -1").unwrap(), vec![0.5, -1.0]);
        assert!(parse_point("a,1").is_err());
    }
}
