//! TOML run configuration. Every section is optional; command-line flags
//! override file values, and the resolved result is written next to the
//! outputs of each run.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use straightfm::diffusion::{DiffusionConfig, NoiseSchedule};
use straightfm::flowmatch::TrainConfig;
use straightfm::odesolve::Solver;
use straightfm::synthdata::{DatasetKind, DatasetSpec};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: Option<DatasetKind>,
    pub scale: Option<f64>,
    pub noise_std: Option<f64>,
}

impl DatasetSection {
    pub fn resolve(&self) -> Option<DatasetSpec> {
        let kind = self.name?;
        let mut spec = DatasetSpec::scaled(kind, self.scale.unwrap_or(2.0));
        if let Some(n) = self.noise_std {
            spec.noise_std = n;
        }
        Some(spec)
    }

    pub fn from_spec(spec: &DatasetSpec) -> Self {
        Self {
            name: Some(spec.kind),
            scale: Some(spec.scale),
            noise_std: Some(spec.noise_std),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub solver: Solver,
    pub steps: usize,
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            solver: Solver::Euler,
            steps: 100,
            n: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metrics: Vec<String>,
    pub steps_list: Vec<usize>,
    pub n: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: vec!["straightness".into(), "w2".into(), "cost".into()],
            steps_list: vec![1, 3, 5, 100],
            n: 1024,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub dataset: DatasetSection,
    pub schedule: NoiseSchedule,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing resolved config")?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
