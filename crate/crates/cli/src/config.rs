use serde::{Deserialize, Serialize};
use std::path::Path;
use tractshape::lasso::LassoConfig;
use tractshape::oracle::DEFAULT_VOXEL_SIZE;
use tractshape::synth::DatasetConfig;
use tractshape::trainer::TrainConfig;

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "TRACTSHAPE_SEED";

/// Everything a run depends on besides file paths. Built from defaults,
/// then the `--config` file, then flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub voxel_size: f64,
    pub synth: DatasetConfig,
    pub train: TrainConfig,
    pub lasso: LassoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            voxel_size: DEFAULT_VOXEL_SIZE,
            synth: DatasetConfig::default(),
            train: TrainConfig::desk(),
            lasso: LassoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Seed precedence: flag, then environment, then file, then default.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<String>) -> Result<(), String> {
        if let Some(seed) = flag {
            self.seed = seed;
        } else if let Some(text) = env {
            self.seed = text
                .trim()
                .parse()
                .map_err(|_| format!("{SEED_ENV} must be an unsigned integer, got '{text}'"))?;
        }
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        Ok(())
    }

    /// One-line provenance header embedded in every report.
    pub fn provenance(&self) -> Vec<String> {
        vec![
            format!("tool: tractshape {}", env!("CARGO_PKG_VERSION")),
            format!("config: {}", serde_json::to_string(self).expect("config serializes")),
        ]
    }
}
