use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vseg::losses::LossConfig;
use vseg::net::NetworkConfig;
use vseg::phantom::PhantomSpec;
use vseg::trainer::TrainSchedule;
use vseg::{Error, Result};

/// Everything a run needs, as one JSON document. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub phantom: PhantomSpec,
    /// Phantoms `0..train_samples` train; the next `held_out_samples` evaluate.
    pub train_samples: u64,
    pub held_out_samples: u64,
    /// Network-initialisation and schedule seeds; the first drives single
    /// runs, ablation grids average over all of them.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::anatomynet_mini(),
            loss: LossConfig::default(),
            schedule: TrainSchedule::desk(),
            phantom: PhantomSpec::with_dims([48, 48, 48], 0),
            train_samples: 10,
            held_out_samples: 2,
            seeds: vec![0],
            output_dir: PathBuf::from("vseg-out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.phantom.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.train_samples == 0 {
            return Err(Error::Config("train_samples must be positive".into()));
        }
        if self.phantom.num_classes() != self.network.num_classes {
            return Err(Error::Config(format!(
                "phantom has {} classes, network {}",
                self.phantom.num_classes(),
                self.network.num_classes
            )));
        }
        Ok(())
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }

    pub fn primary_seed(&self) -> u64 {
        self.seeds[0]
    }
}
