//! Experiment configuration: a TOML file validated before any computation.
//!
//! ```toml
//! scenario = "correlated_bounded"   # or a table: [scenario] name = ..., initial_mean = ...
//! solver = "both"                   # particle | grid | both
//! dt = 1e-3
//! T = 1.0
//! N = 10000
//! replicas = 200
//! seed = 42
//!
//! [grid]
//! x_min = -8.0
//! x_max = 8.0
//! n_points = 201
//!
//! [probe]
//! phis = ["one", "tanh", "bump"]
//! frequencies = ["0", "1", "-2", "2,-1", "1,-1,2,-2"]
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use filterlab_core::duality::{default_frequencies, FrequencyChoice};
use filterlab_core::gridpde::Grid1D;
use filterlab_core::model::{self, steps_for, InitialLaw, ScenarioSpec, TestFunction};

use crate::acceptance::Scale;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Particle,
    Grid,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioChoice {
    Name(String),
    Table(ScenarioTable),
}

/// Built-in scenario with an overridden Gaussian initial law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioTable {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_std: Option<f64>,
}

impl ScenarioChoice {
    pub fn name(&self) -> &str {
        match self {
            ScenarioChoice::Name(n) => n,
            ScenarioChoice::Table(t) => &t.name,
        }
    }
}

impl Default for ScenarioChoice {
    fn default() -> Self {
        ScenarioChoice::Name("linear_gaussian".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: -8.0,
            x_max: 8.0,
            n_points: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub phis: Vec<String>,
    pub frequencies: Vec<String>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            phis: ["one", "tanh", "bump"].map(String::from).to_vec(),
            frequencies: default_frequencies().into_iter().map(String::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcceptConfig {
    pub scale: Scale,
    pub criteria: Vec<u32>,
}

impl Default for AcceptConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Full,
            criteria: crate::acceptance::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub solver: Solver,
    /// Step size; the scenario default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(rename = "T", alias = "horizon", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(rename = "N", alias = "particles", skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    pub replicas: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub out: String,
    pub scenario: ScenarioChoice,
    pub grid: GridConfig,
    pub probe: ProbeConfig,
    pub accept: AcceptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Particle,
            dt: None,
            horizon: None,
            particles: None,
            replicas: 1,
            seed: 42,
            workers: None,
            out: "out".into(),
            scenario: ScenarioChoice::default(),
            grid: GridConfig::default(),
            probe: ProbeConfig::default(),
            accept: AcceptConfig::default(),
        }
    }
}

/// Configuration problem, anchored to a line of the source when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.origin, l, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line of the first `key = ...` assignment.
fn key_line(text: &str, keys: &[&str]) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        keys.iter().any(|k| {
            l.strip_prefix(k)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
    })
    .map(|i| i + 1)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
        origin: origin.to_string(),
        line: e.span().map(|s| line_of_offset(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    config.validate().map_err(|(keys, message)| ConfigError {
        origin: origin.to_string(),
        line: key_line(text, keys),
        message,
    })?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        origin: origin.clone(),
        line: None,
        message: format!("cannot read config: {e}"),
    })?;
    parse_config(&text, &origin)
}

pub fn write_config(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("configuration always serialises")
}

type Invalid = (&'static [&'static str], String);

impl ExperimentConfig {
    /// Checks everything that can be checked without running anything.
    /// Errors carry the keys to anchor the message to.
    pub fn validate(&self) -> Result<(), Invalid> {
        let spec = self.spec_unchecked().map_err(|m| (&["scenario", "name"][..], m))?;
        let dt = spec.dt;
        let horizon = spec.horizon;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err((&["dt"], format!("dt must be positive, got {dt}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err((&["T", "horizon"], format!("T must be positive, got {horizon}")));
        }
        if steps_for(horizon, dt).is_err() {
            return Err((&["dt"], format!("dt = {dt} does not divide T = {horizon}")));
        }
        if spec.n_particles == 0 {
            return Err((&["N", "particles"], "N must be at least 1".into()));
        }
        if self.replicas == 0 {
            return Err((&["replicas"], "replicas must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err((&["workers"], "workers must be at least 1".into()));
        }
        let g = &self.grid;
        Grid1D::new(g.x_min, g.x_max, g.n_points).map_err(|e| (&["x_min", "x_max", "n_points"][..], e.to_string()))?;
        for p in &self.probe.phis {
            if TestFunction::by_name(p, 1).is_none() {
                return Err((&["phis"], format!("unknown test function `{p}`")));
            }
        }
        for f in &self.probe.frequencies {
            FrequencyChoice::from_label(f, 1).map_err(|e| (&["frequencies"][..], format!("frequency `{f}`: {e}")))?;
        }
        let c = &self.accept.criteria;
        for (i, id) in c.iter().enumerate() {
            if !(1..=10).contains(id) {
                return Err((&["criteria"], format!("criterion {id} does not exist (1-10)")));
            }
            if c[..i].contains(id) {
                return Err((&["criteria"], format!("criterion {id} listed twice")));
            }
        }
        Ok(())
    }

    fn spec_unchecked(&self) -> Result<ScenarioSpec, String> {
        let name = self.scenario.name();
        let mut spec = model::scenario(name).ok_or_else(|| {
            let known: Vec<String> = model::builtin_scenarios().into_iter().map(|s| s.name).collect();
            format!("unknown scenario `{name}` (known: {})", known.join(", "))
        })?;
        if let ScenarioChoice::Table(t) = &self.scenario {
            if t.initial_mean.is_some() || t.initial_std.is_some() {
                let InitialLaw::Gaussian { mean, std, y0 } = &spec.initial else {
                    return Err(format!("scenario `{name}` has no Gaussian initial law to override"));
                };
                let sd = t.initial_std.unwrap_or(std[0]);
                if !(sd > 0.0) {
                    return Err(format!("initial_std must be positive, got {sd}"));
                }
                spec.initial = InitialLaw::Gaussian {
                    mean: vec![t.initial_mean.unwrap_or(mean[0]); mean.len()],
                    std: vec![sd; std.len()],
                    y0: y0.clone(),
                };
            }
        }
        if let Some(dt) = self.dt {
            spec.dt = dt;
        }
        if let Some(t) = self.horizon {
            spec.horizon = t;
        }
        if let Some(n) = self.particles {
            spec.n_particles = n;
        }
        spec.n_replicas = self.replicas;
        spec.seed = self.seed;
        Ok(spec)
    }

    /// The scenario with every override applied.
    pub fn spec(&self) -> Result<ScenarioSpec, String> {
        self.spec_unchecked()
    }

    pub fn grid(&self) -> Grid1D {
        Grid1D::new(self.grid.x_min, self.grid.x_max, self.grid.n_points).expect("validated grid")
    }

    pub fn test_functions(&self) -> Vec<TestFunction> {
        self.probe
            .phis
            .iter()
            .map(|p| TestFunction::by_name(p, 1).expect("validated name"))
            .collect()
    }
}
