//! Synthetic shape dataset: procedural shapes, keyword descriptions,
//! silhouettes, partial observations, splits and on-disk layout.

mod sample;
mod shapes;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{TsdfGrid, DEFAULT_TRUNCATION};

pub use sample::{
    make_partial, render_silhouette, DatasetSample, ObservationMask, PartialMode, Silhouette,
    SILHOUETTE_SIZE,
};
pub use shapes::{generate_shape, keyword_id, Category, ShapeAttributes, ShapeSpec, TopShape, VOCABULARY};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCABULARY_FILE: &str = "vocabulary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub resolution: usize,
    pub truncation: f64,
    pub partial_mode: PartialMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 500,
            seed: 0,
            split_ratio: 0.8,
            resolution: 16,
            truncation: DEFAULT_TRUNCATION,
            partial_mode: PartialMode::BottomHalf,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<DatasetSample>,
    pub test: Vec<DatasetSample>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &DatasetSample> {
        self.train.iter().chain(&self.test)
    }
}

/// Generate `n` samples with categories cycling through [`Category::ALL`],
/// so both splits stay balanced to within one sample per category.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.n < 10 {
        return Err(Error::invalid(format!("dataset needs n >= 10, got {}", config.n)));
    }
    if !(config.split_ratio > 0.0 && config.split_ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {}", config.split_ratio)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(config.n);
    while samples.len() < config.n {
        let i = samples.len();
        let category = Category::ALL[i % Category::ALL.len()];
        let spec = ShapeSpec::random(category, &mut rng);
        if !seen.insert(spec.seed) {
            continue;
        }
        let id = format!("{}-{i:05}", category.name());
        samples.push(DatasetSample::from_spec(
            id,
            spec,
            config.resolution,
            config.truncation,
            config.partial_mode,
        )?);
    }
    let n_train = ((config.n as f64 * config.split_ratio).round() as usize).clamp(1, config.n - 1);
    let test = samples.split_off(n_train);
    Ok(Dataset {
        config: config.clone(),
        train: samples,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    id: String,
    category: Category,
    attributes: ShapeAttributes,
    seed: u64,
    keywords: Vec<String>,
    silhouette: String,
    partial_mode: PartialMode,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    categories: Vec<String>,
    train: Vec<String>,
    test: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Keyword vocabulary as a `token -> id` JSON object.
pub fn vocabulary_json() -> BTreeMap<&'static str, usize> {
    VOCABULARY.iter().enumerate().map(|(i, w)| (*w, i)).collect()
}

/// Write `<id>.tsdf` + `<id>.json` per sample, the manifest and vocabulary.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in dataset.all() {
        s.grid.save(dir.join(format!("{}.tsdf", s.id)))?;
        let sidecar = Sidecar {
            id: s.id.clone(),
            category: s.spec.category,
            attributes: s.spec.attributes,
            seed: s.spec.seed,
            keywords: s.keywords.clone(),
            silhouette: s.silhouette.to_base64(),
            partial_mode: s.partial_mode,
        };
        write_json(&dir.join(format!("{}.json", s.id)), &sidecar)?;
    }
    let manifest = Manifest {
        config: dataset.config.clone(),
        categories: Category::ALL.iter().map(|c| c.name().to_string()).collect(),
        train: dataset.train.iter().map(|s| s.id.clone()).collect(),
        test: dataset.test.iter().map(|s| s.id.clone()).collect(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&dir.join(VOCABULARY_FILE), &vocabulary_json())
}

fn load_sample(dir: &Path, id: &str) -> Result<DatasetSample> {
    let json_path = dir.join(format!("{id}.json"));
    let sidecar: Sidecar = read_json(&json_path)?;
    let grid = TsdfGrid::load(dir.join(format!("{id}.tsdf")))?;
    let spec = ShapeSpec {
        category: sidecar.category,
        attributes: sidecar.attributes,
        seed: sidecar.seed,
    };
    let sample = DatasetSample::from_grid(sidecar.id, spec, grid, sidecar.partial_mode);
    let silhouette = Silhouette::from_base64(&sidecar.silhouette)?;
    if silhouette != sample.silhouette || sidecar.keywords != sample.keywords {
        return Err(Error::format(&json_path, "sidecar disagrees with the stored grid"));
    }
    Ok(sample)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let load = |ids: &[String]| ids.iter().map(|id| load_sample(dir, id)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
        config: manifest.config,
    })
}
