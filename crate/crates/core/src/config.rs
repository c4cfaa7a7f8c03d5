//! Run configuration and certificate files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::DEFAULT_WHEELBASE;
use crate::error::{Error, Result};
use crate::funnel::FunnelFunction;
use crate::learn::SynthesisConfig;
use crate::problem::{Mode, SegmentProblem};
use crate::scenario::{builtin, Scenario, DEFAULT_U0_BOUNDS};
use crate::sim::{Disturbance, InitialSampler, SimConfig};

pub const CERTIFICATE_FORMAT: &str = "pathfunnel-certificate";
pub const CERTIFICATE_VERSION: u32 = 1;

/// A catalog id or a full inline segment definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Id(String),
    Inline(Box<Scenario>),
}

impl ScenarioRef {
    pub fn resolve(&self) -> Result<Scenario> {
        match self {
            ScenarioRef::Id(id) => builtin(id),
            ScenarioRef::Inline(s) => Ok((**s).clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: Option<ScenarioRef>,
    pub mode: Mode,
    pub seed: u64,
    pub u0_bounds: (f64, f64),
    pub wheelbase: f64,
    pub synthesis: SynthesisConfig,
    pub sim: SimConfig,
    pub runs: usize,
    pub laps: usize,
    pub disturbance: Disturbance,
    pub sampler: InitialSampler,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            mode: Mode::Pf,
            seed: 1,
            u0_bounds: DEFAULT_U0_BOUNDS,
            wheelbase: DEFAULT_WHEELBASE,
            synthesis: SynthesisConfig::default(),
            sim: SimConfig::default(),
            runs: 100,
            laps: 1,
            disturbance: Disturbance::None,
            sampler: InitialSampler::InitialSet,
        }
    }
}

/// Schema error with the source position.
fn located(path: &Path, e: serde_json::Error) -> Error {
    Error::Config(format!(
        "{}:{}:{}: {}",
        path.display(),
        e.line(),
        e.column(),
        e
    ))
}

impl ScenarioConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| located(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthesis.validate()?;
        self.sim.validate()?;
        self.disturbance.validate(self.sim.horizon)?;
        if self.runs == 0 || self.laps == 0 {
            return Err(Error::Config("runs and laps must be at least 1".into()));
        }
        if let Some(s) = &self.scenario {
            self.problem_for(&s.resolve()?)?;
        }
        Ok(())
    }

    pub fn problem_for(&self, s: &Scenario) -> Result<SegmentProblem> {
        s.problem(self.u0_bounds, self.wheelbase, self.mode)
    }
}

/// A found funnel together with everything needed to re-check it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub format: String,
    pub version: u32,
    pub scenario: Scenario,
    pub mode: Mode,
    pub u0_bounds: (f64, f64),
    pub wheelbase: f64,
    pub funnel: FunnelFunction,
    pub seed: u64,
    pub iterations: usize,
}

impl Certificate {
    pub fn new(
        scenario: Scenario,
        problem: &SegmentProblem,
        funnel: FunnelFunction,
        seed: u64,
        iterations: usize,
    ) -> Self {
        let u0_bounds = match problem.mode {
            Mode::Pf => (problem.inputs.lower[0], problem.inputs.upper[0]),
            Mode::Tt => DEFAULT_U0_BOUNDS,
        };
        Self {
            format: CERTIFICATE_FORMAT.into(),
            version: CERTIFICATE_VERSION,
            scenario,
            mode: problem.mode,
            u0_bounds,
            wheelbase: problem.wheelbase,
            funnel,
            seed,
            iterations,
        }
    }

    pub fn problem(&self) -> Result<SegmentProblem> {
        self.scenario
            .problem(self.u0_bounds, self.wheelbase, self.mode)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: Self = serde_json::from_str(&text).map_err(|e| located(path, e))?;
        if c.format != CERTIFICATE_FORMAT || c.version != CERTIFICATE_VERSION {
            return Err(Error::Config(format!(
                "{}: expected format '{CERTIFICATE_FORMAT}' version {CERTIFICATE_VERSION}",
                path.display()
            )));
        }
        c.problem()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
