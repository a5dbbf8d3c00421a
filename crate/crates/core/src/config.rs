//! Declarative run configuration. A TOML file may hold one section per
//! command; unknown keys are rejected. Each run writes the configuration it
//! actually used next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ClassifierRecipe;
use crate::dataset::PairOptions;
use crate::detector::DetectorRecipe;
use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::pipeline::PipelineOptions;
use crate::siamese::{ConfigName, TrainRecipe};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub cases: usize,
    pub first_seed: u64,
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self { cases: 40, first_seed: 0, spec: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub data: Option<PathBuf>,
    pub background_per_volume: usize,
    pub seed: u64,
    pub recipe: ClassifierRecipe,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self { data: None, background_per_volume: 4, seed: 0, recipe: ClassifierRecipe::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiameseSection {
    pub data: Option<PathBuf>,
    pub config: ConfigName,
    /// Pretrained backbone checkpoint; a seeded random one when absent.
    pub backbone: Option<PathBuf>,
    pub backbone_seed: u64,
    /// Cross-validation folds; 0 trains once on every pair.
    pub folds: usize,
    /// Hard-negative pairs sampled like detector output; annotation pairs
    /// when absent.
    pub pairs: Option<PairOptions>,
    pub recipe: TrainRecipe,
}

impl Default for SiameseSection {
    fn default() -> Self {
        Self { data: None, config: ConfigName::FIFB, backbone: None, backbone_seed: 0, folds: 10, pairs: None, recipe: TrainRecipe::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub data: Option<PathBuf>,
    pub anchors_mm: Vec<f64>,
    pub recipe: DetectorRecipe,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            data: None,
            anchors_mm: crate::detector::DEFAULT_ANCHORS_MM.to_vec(),
            recipe: DetectorRecipe::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub data: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub siamese: Option<PathBuf>,
    pub options: PipelineOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub phantom: PhantomSection,
    pub classifier: ClassifierSection,
    pub siamese: SiameseSection,
    pub detector: DetectorSection,
    pub pipeline: PipelineSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the configuration as used into `dir`.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(SNAPSHOT_FILE);
        fs::create_dir_all(dir.as_ref())?;
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

/// Every path must exist; the error lists all missing ones at once.
pub fn require_paths(paths: &[(&str, Option<&Path>)]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter_map(|(what, p)| match p {
            None => Some(format!("{what} (not set)")),
            Some(p) if !p.exists() => Some(format!("{what} ({})", p.display())),
            _ => None,
        })
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing inputs: {}", missing.join(", "))))
    }
}
