//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::Component;
use crate::field::{OutputTransform, Variant};
use crate::optimize::OptimizerConfig;
use crate::solver::{NewtonConfig, PhysicsConstants};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Viscosity from cavity velocities.
    CavityViscosity,
    /// Conductivity from velocity and temperature samples.
    ConjugateHeat,
    /// Layered viscosity from passive-particle velocities.
    PassiveTransport,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::CavityViscosity => "cavity_viscosity",
            Experiment::ConjugateHeat => "conjugate_heat",
            Experiment::PassiveTransport => "passive_transport",
        }
    }

    /// File stem of the estimated coefficient.
    pub fn coefficient_name(self) -> &'static str {
        match self {
            Experiment::ConjugateHeat => "k",
            _ => "nu",
        }
    }

    pub fn reference_coefficient(self, x: f64, y: f64) -> f64 {
        match self {
            Experiment::CavityViscosity => cavity_viscosity(x, y),
            Experiment::ConjugateHeat => 1.0 + x * x + x / (1.0 + y * y),
            Experiment::PassiveTransport => 0.01 + 0.01 / (1.0 + x * x),
        }
    }

    pub fn observed_components(self) -> Vec<Component> {
        match self {
            Experiment::CavityViscosity => vec![Component::U, Component::V],
            Experiment::ConjugateHeat => vec![Component::U, Component::V, Component::T],
            Experiment::PassiveTransport => vec![Component::W1, Component::W2],
        }
    }

    fn default_variant(self) -> Variant {
        match self {
            Experiment::PassiveTransport => Variant::DnnLayered,
            _ => Variant::Dnn2d,
        }
    }

    fn default_transform(self) -> OutputTransform {
        match self {
            Experiment::PassiveTransport => OutputTransform {
                offset: 0.01,
                scale: 0.01,
            },
            _ => OutputTransform::offset(1.0),
        }
    }

    fn default_observations(self, node_count: usize) -> usize {
        match self {
            Experiment::CavityViscosity => node_count,
            Experiment::ConjugateHeat => 40,
            Experiment::PassiveTransport => 22,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cavity_viscosity" => Ok(Experiment::CavityViscosity),
            "conjugate_heat" => Ok(Experiment::ConjugateHeat),
            "passive_transport" => Ok(Experiment::PassiveTransport),
            other => Err(Error::Config(format!("unknown experiment `{other}`"))),
        }
    }
}

/// Viscosity of the cavity experiment; also drives the flow of the heat experiment.
pub fn cavity_viscosity(x: f64, y: f64) -> f64 {
    1.0 + 6.0 * x * x + x / (1.0 + 2.0 * y * y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: Experiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { nx: 21, ny: 21 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<Variant>,
    pub seed: u64,
    pub init_scale: Option<f64>,
    pub output_offset: Option<f64>,
    pub output_scale: Option<f64>,
}

/// One noise level or a sweep over several.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseLevels {
    Single(f64),
    Sweep(Vec<f64>),
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels::Single(0.0)
    }
}

impl NoiseLevels {
    pub fn levels(&self) -> Vec<f64> {
        match self {
            NoiseLevels::Single(e) => vec![*e],
            NoiseLevels::Sweep(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSection {
    /// Number of sampled nodes; defaults depend on the experiment.
    pub count: Option<usize>,
    pub seed: u64,
    pub noise: NoiseLevels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundarySection {
    pub lid_velocity: f64,
    pub temperature: f64,
}

impl Default for BoundarySection {
    fn default() -> Self {
        Self {
            lid_velocity: 1.0,
            temperature: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol_residual: f64,
    pub max_iter: usize,
    /// Particle time step and number of steps.
    pub dt: f64,
    pub n_steps: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let newton = NewtonConfig::default();
        Self {
            tol_residual: newton.tol_residual,
            max_iter: newton.max_iter,
            dt: 0.1,
            n_steps: 50,
        }
    }
}

impl SolverSection {
    pub fn newton(&self) -> NewtonConfig {
        NewtonConfig {
            tol_residual: self.tol_residual,
            max_iter: self.max_iter,
            initial_guess: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub observations: ObservationSection,
    #[serde(default)]
    pub physics: PhysicsConstants,
    #[serde(default)]
    pub boundary: BoundarySection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment: ExperimentSection { name: experiment },
            grid: GridSection::default(),
            model: ModelSection::default(),
            optimizer: OptimizerConfig::default(),
            observations: ObservationSection::default(),
            physics: PhysicsConstants::default(),
            boundary: BoundarySection::default(),
            solver: SolverSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn name(&self) -> Experiment {
        self.experiment.name
    }

    pub fn variant(&self) -> Variant {
        self.model.variant.unwrap_or(self.name().default_variant())
    }

    pub fn transform(&self) -> OutputTransform {
        let d = self.name().default_transform();
        OutputTransform {
            offset: self.model.output_offset.unwrap_or(d.offset),
            scale: self.model.output_scale.unwrap_or(d.scale),
        }
    }

    pub fn init_scale(&self) -> f64 {
        self.model.init_scale.unwrap_or(1.0)
    }

    pub fn observation_count(&self) -> usize {
        self.observations
            .count
            .unwrap_or(self.name().default_observations(self.grid.nx * self.grid.ny))
    }

    pub fn noise_levels(&self) -> Vec<f64> {
        self.observations.noise.levels()
    }

    /// A copy with a single noise level, for one member of a sweep.
    pub fn with_noise(&self, epsilon: f64) -> Self {
        let mut c = self.clone();
        c.observations.noise = NoiseLevels::Single(epsilon);
        c
    }

    /// Checks every value before any solve is attempted.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        if nx < 2 || ny < 2 {
            return bad(format!("grid needs at least 2 nodes per axis, got {nx}x{ny}"));
        }
        let init = self.init_scale();
        if !(init >= 0.0 && init.is_finite()) {
            return bad(format!("init_scale must be non-negative, got {init}"));
        }
        let t = self.transform();
        if !(t.offset.is_finite() && t.scale.is_finite() && t.scale != 0.0) {
            return bad("output transform must be finite with a nonzero scale".into());
        }
        let count = self.observation_count();
        if count == 0 || count > nx * ny {
            return bad(format!("observation count must be in 1..={}, got {count}", nx * ny));
        }
        let levels = self.noise_levels();
        if levels.is_empty() {
            return bad("noise sweep is empty".into());
        }
        if let Some(e) = levels.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return bad(format!("noise level must be non-negative, got {e}"));
        }
        self.optimizer.validate()?;
        self.physics.validate()?;
        self.solver.newton().validate()?;
        if !(self.solver.dt > 0.0 && self.solver.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.solver.dt));
        }
        if self.solver.n_steps == 0 {
            return bad("n_steps must be at least 1".into());
        }
        if !self.boundary.lid_velocity.is_finite() || !self.boundary.temperature.is_finite() {
            return bad("boundary values must be finite".into());
        }
        for s in [&self.physics.body_force_f, &self.physics.body_force_g, &self.physics.heat_source] {
            if let crate::solver::Source::Nodal(v) = s {
                if v.len() != nx * ny {
                    return bad(format!("nodal source has {} values, grid has {} nodes", v.len(), nx * ny));
                }
            }
        }
        Ok(())
    }
}
