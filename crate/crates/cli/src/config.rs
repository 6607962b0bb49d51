//! Run configuration, read from TOML with unknown keys rejected.

use std::collections::BTreeMap;
use std::path::Path;

use mfg_core::bsde::PicardOptions;
use mfg_core::forward_sim::{InitialLaw, NoiseBundle, TimeGrid};
use mfg_core::model::{ModelSpec, PRESETS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub nash: NashConfig,
}

fn default_seed() -> u64 {
    42
}

fn default_out() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

fn default_horizon() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { steps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Common-noise paths M.
    pub paths: usize,
    /// Particles per path K.
    pub particles: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            paths: 64,
            particles: 256,
        }
    }
}

/// Law of X₀.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Constant { value: f64 },
    Normal { mean: f64, std: f64 },
    Empirical { atoms: Vec<f64> },
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::Normal { mean: 1.0, std: 0.5 }
    }
}

impl InitialConfig {
    pub fn law(&self) -> InitialLaw {
        match self {
            InitialConfig::Constant { value } => InitialLaw::Constant { value: *value },
            InitialConfig::Normal { mean, std } => InitialLaw::Normal { mean: *mean, std: *std },
            InitialConfig::Empirical { atoms } => InitialLaw::Empirical { atoms: atoms.clone() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Continuation,
    Stitched,
    /// The optimal control problem against a frozen flow m ≡ δ_{frozen_mean}.
    GivenM,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverChoice,
    /// Defaults to 1e-4 for linear-quadratic models and 1e-3 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    /// Location of the Dirac flow the `given_m` method solves against.
    #[serde(default)]
    pub frozen_mean: f64,
    /// Also run the other existence method and report the distance.
    #[serde(default)]
    pub agreement: bool,
}

fn default_max_iter() -> usize {
    60
}

fn default_eta0() -> f64 {
    0.25
}

fn default_intervals() -> usize {
    4
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverChoice::Continuation,
            tol: None,
            max_iter: default_max_iter(),
            eta0: default_eta0(),
            intervals: default_intervals(),
            frozen_mean: 0.0,
            agreement: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Step counts of the Δt study; each must divide the finest times `fine_factor`.
    pub dt_levels: Vec<usize>,
    pub fine_factor: usize,
    /// Particle counts of the K study.
    pub particle_levels: Vec<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            dt_levels: vec![25, 50, 100],
            fine_factor: 2,
            particle_levels: vec![64, 128, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashConfig {
    pub players: Vec<usize>,
    pub seeds: Vec<u64>,
    pub replications: usize,
}

impl Default for NashConfig {
    fn default() -> Self {
        Self {
            players: vec![4, 16, 64, 256],
            seeds: vec![21, 22, 23, 24, 25],
            replications: 2048,
        }
    }
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{field}`: {reason}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form. The output directory does not
    /// enter the hash: it moves artifacts, it does not change them.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { out: String::new(), ..self.clone() };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !PRESETS.contains(&self.model.preset.as_str()) {
            return Err(invalid(
                "model.preset",
                format!("unknown preset `{}` (known: {})", self.model.preset, PRESETS.join(", ")),
            ));
        }
        self.spec()?;
        if !(1..=100_000).contains(&self.grid.steps) {
            return Err(invalid("grid.steps", "must be in 1..=100000"));
        }
        if self.ensemble.paths < 2 {
            return Err(invalid("ensemble.paths", "need at least 2 common paths"));
        }
        if self.ensemble.particles < 2 {
            return Err(invalid("ensemble.particles", "need at least 2 particles per path"));
        }
        self.initial.law().validate().map_err(|e| invalid("initial", e))?;
        let s = &self.solver;
        if let Some(tol) = s.tol {
            if !(tol > 0.0 && tol < 1.0) {
                return Err(invalid("solver.tol", "must be in (0, 1)"));
            }
        }
        if s.max_iter == 0 {
            return Err(invalid("solver.max_iter", "must be positive"));
        }
        if !(s.eta0 > 0.0 && s.eta0 <= 1.0) {
            return Err(invalid("solver.eta0", "must be in (0, 1]"));
        }
        if s.intervals == 0 || s.intervals > self.grid.steps {
            return Err(invalid("solver.intervals", "must be in 1..=grid.steps"));
        }
        if !s.frozen_mean.is_finite() {
            return Err(invalid("solver.frozen_mean", "must be finite"));
        }
        let o = &self.oracle;
        if o.dt_levels.is_empty() || o.dt_levels.contains(&0) || o.fine_factor == 0 {
            return Err(invalid("oracle", "levels and fine_factor must be positive"));
        }
        let finest = o.dt_levels.iter().max().unwrap() * o.fine_factor;
        if o.dt_levels.iter().any(|l| finest % l != 0) {
            return Err(invalid("oracle.dt_levels", "every level must divide the finest level times fine_factor"));
        }
        if o.particle_levels.is_empty() || o.particle_levels.iter().any(|&k| k < 2) {
            return Err(invalid("oracle.particle_levels", "need at least 2 particles per level"));
        }
        let n = &self.nash;
        if n.players.is_empty() || n.players.iter().any(|&p| p < 2) {
            return Err(invalid("nash.players", "every game needs at least 2 players"));
        }
        if n.seeds.is_empty() {
            return Err(invalid("nash.seeds", "need at least one seed"));
        }
        if n.replications < 2 {
            return Err(invalid("nash.replications", "need at least 2 replications"));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ModelSpec, CliError> {
        ModelSpec::preset(&self.model.preset, self.model.horizon, &self.model.params)
            .map_err(|e| invalid("model", e))
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.model.horizon, self.grid.steps).expect("validated grid")
    }

    pub fn noise(&self) -> NoiseBundle {
        NoiseBundle::new(self.seed, self.ensemble.paths, self.ensemble.particles, self.grid()).expect("validated ensemble")
    }

    pub fn picard(&self, spec: &ModelSpec) -> PicardOptions {
        let mut p = PicardOptions::for_spec(spec);
        if let Some(tol) = self.solver.tol {
            p.tol = tol;
        }
        p.max_iter = self.solver.max_iter;
        p
    }
}
