//! Run artifacts: CSV time series behind a provenance header line, and one
//! JSON summary per command.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mfg_core::bsde::StepFit;
use mfg_core::mfg_solvers::{ContinuationStep, StitchReport};
use mfg_core::model::ConditionReport;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance shared by every file of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub config_hash: String,
    pub seed: u64,
}

impl Header {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }

    pub fn line(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }

    /// Parses a header line as written by [`Header::line`].
    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# config_hash=")?;
        let (hash, seed) = rest.split_once(" seed=")?;
        Some(Self {
            config_hash: hash.to_string(),
            seed: seed.trim().parse().ok()?,
        })
    }
}

/// Output directory of a run.
pub struct Artifacts {
    dir: PathBuf,
    header: Header,
}

impl Artifacts {
    pub fn create(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = PathBuf::from(&cfg.out);
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            header: Header::of(cfg),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// CSV writer whose first line is the provenance header.
    pub fn csv(&self, name: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
        let mut file = BufWriter::new(File::create(self.path(name))?);
        writeln!(file, "{}", self.header.line())?;
        Ok(csv::Writer::from_writer(file))
    }

    /// JSON file with the provenance fields up front.
    pub fn json<T: Serialize>(&self, name: &str, body: &T) -> Result<(), CliError> {
        let doc = Stamped {
            config_hash: &self.header.config_hash,
            seed: self.header.seed,
            body,
        };
        let mut file = BufWriter::new(File::create(self.path(name))?);
        serde_json::to_writer_pretty(&mut file, &doc)?;
        writeln!(file)?;
        file.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

/// One residual curve of a run: a γ-step, an interval fixed point, or a
/// plain Picard solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub stage: String,
    pub residuals: Vec<f64>,
    /// Contraction ratio observed on this curve, when the stage has one.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub artifact_version: &'static str,
    pub config: RunConfig,
    pub method: String,
    pub resumed: bool,
    pub residuals: Vec<ResidualSeries>,
    /// Iterations of the final Picard solve.
    pub final_iterations: usize,
    pub max_ratio: Option<f64>,
    pub gamma_schedule: Option<Vec<ContinuationStep>>,
    pub intervals: Option<StitchReport>,
    pub condition: ConditionReport,
    /// Relative rms control distance to the other existence method.
    pub method_agreement: Option<f64>,
    pub cost: f64,
    pub optimality_residual: f64,
    pub wall_clock_seconds: f64,
}

/// Regression fits of a converged run, enough to rebuild its feedback.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackState {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub fits: Vec<StepFit>,
}

impl FeedbackState {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read resume state {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad resume state {}: {e}", path.display())))
    }
}
