//! The run configuration file and seed plumbing.

use std::path::Path;

use anyhow::{Context, Result};
use poseview::clustering::ClusterConfig;
use poseview::diffusion::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use poseview::diffusion::{make_schedule, NoiseSchedule, TrainConfig, UNetConfig};
use poseview::sampling::SamplerConfig;
use poseview::synth::SyntheticSpec;
use poseview::tensor::derive_seed;
use serde::{Deserialize, Serialize};

/// File name of the resolved config echoed into every output directory.
pub const ECHO_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> poseview::Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Every setting of every stage. Stage seeds are derived from `seed` when the
/// config is resolved, so a single number reproduces a whole pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SyntheticSpec,
    pub cluster: ClusterConfig,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SyntheticSpec::default(),
            cluster: ClusterConfig::default(),
            schedule: ScheduleConfig::default(),
            unet: UNetConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

// Tags for the per-stage seed derivation.
const TAG_CLUSTER: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_SAMPLER: u64 = 4;

/// TOML integers are signed, so derived seeds keep 63 bits.
fn stage_seed(seed: u64, tag: u64) -> u64 {
    derive_seed(seed, &[tag]) >> 1
}

impl RunConfig {
    /// Reads `path` if given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text)
                    .map_err(|e| crate::Validation(format!("config {}: {e}", p.display())).into())
            }
        }
    }

    /// Overwrites the stage seeds with values derived from `seed`.
    pub fn resolve(mut self) -> Self {
        self.synth.seed = self.seed;
        self.cluster.seed = stage_seed(self.seed, TAG_CLUSTER);
        self.train.seed = stage_seed(self.seed, TAG_TRAIN);
        self.sampler.seed = stage_seed(self.seed, TAG_SAMPLER);
        self
    }

    /// Seed for fresh network weights.
    pub fn init_seed(&self) -> u64 {
        stage_seed(self.seed, TAG_INIT)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ECHO_FILE), self.to_toml()?)?;
        Ok(())
    }
}
