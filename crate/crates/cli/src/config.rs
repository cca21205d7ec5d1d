use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slipgaze::gaze::PipelineOptions;
use slipgaze::rig::RigLayout;
use slipgaze::sim::Scenario;

use crate::error::CliError;

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

/// Everything a command needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub rig: RigLayout,
    pub pipeline: PipelineOptions,
    pub out_dir: Option<PathBuf>,
    /// Overrides `scenario.rng_seed` when set.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            scenario: Scenario::default(),
            rig: RigLayout::default(),
            pipeline: PipelineOptions::default(),
            out_dir: None,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        if let Some(seed) = cfg.seed {
            cfg.scenario.rng_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::parse(&crate::io::read(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!("schema_version: unsupported value {}", self.schema_version)));
        }
        self.scenario.validate().map_err(CliError::from_validation)?;
        self.rig.validate().map_err(CliError::from_validation)?;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.scenario.rng_seed = seed;
    }
}
