use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdfgen_core::diffusion::DiffusionConfig;
use sdfgen_core::geometry::DEFAULT_TRUNCATION;

/// Settings shared by every subcommand and the service. Relative paths are
/// resolved against the working directory. See `docs/config.schema.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory written by `gen-dataset`.
    pub dataset: PathBuf,
    /// Directory holding `vqvae.ckpt`, `diffusion.ckpt` and `critic.ckpt`.
    pub checkpoints: PathBuf,
    /// Where the service writes finished meshes; `null` keeps them in memory only.
    pub results: Option<PathBuf>,
    pub resolution: usize,
    pub truncation: f64,
    pub timesteps: usize,
    /// Defaults to the linear range rescaled to `timesteps`.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub port: u16,
    pub queue_capacity: usize,
    pub workers: usize,
    /// Number of test-split shapes offered by the catalog endpoint.
    pub catalog_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/dataset"),
            checkpoints: PathBuf::from("data/models"),
            results: None,
            resolution: 16,
            truncation: DEFAULT_TRUNCATION,
            timesteps: 100,
            beta_start: None,
            beta_end: None,
            port: 8080,
            queue_capacity: 8,
            workers: 1,
            catalog_size: 8,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return Err(format!("resolution must be a multiple of 4 and >= 8, got {}", self.resolution));
        }
        if !(self.truncation > 0.0) {
            return Err("truncation must be positive".into());
        }
        if self.timesteps <= 20 {
            return Err(format!("timesteps must exceed 20, got {}", self.timesteps));
        }
        if self.queue_capacity == 0 || self.workers == 0 {
            return Err("queue_capacity and workers must be positive".into());
        }
        Ok(())
    }

    /// Diffusion settings implied by the schedule fields.
    pub fn diffusion(&self) -> DiffusionConfig {
        let k = 1000.0 / self.timesteps as f64;
        DiffusionConfig {
            timesteps: self.timesteps,
            beta_start: self.beta_start.unwrap_or(1e-4 * k),
            beta_end: self.beta_end.unwrap_or(0.02 * k),
            grid_resolution: self.resolution,
            ..DiffusionConfig::default()
        }
    }
}
