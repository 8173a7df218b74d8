//! Experiment configuration: one JSON document drives every pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{DEFAULT_DURATION_S, DEFAULT_SAMPLE_RATE};
use crate::dataset::Family;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, SplitBy, MIN_GROUPS};
use crate::forest::ForestConfig;
use crate::model::{ModelSpec, Variant};
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;
use crate::wav::WavEncoding;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub family: Family,
    pub n_loops: usize,
    /// Keep every `thin`-th setting of each axis per file.
    pub thin: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub encoding: WavEncoding,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            family: Family::DS1,
            n_loops: 8,
            thin: 1,
            sample_rate: DEFAULT_SAMPLE_RATE,
            duration_s: DEFAULT_DURATION_S,
            encoding: WavEncoding::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub width: f64,
    /// Model 1 only: number of trailing conv blocks with 1×3 kernels.
    pub flat_tail: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Model1Mel,
            width: 0.5,
            flat_tail: 0,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, num_para: usize) -> ModelSpec {
        let mut spec = ModelSpec::for_variant(self.variant, num_para);
        spec.width = self.width;
        spec.with_flat_tail(self.flat_tail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Embedding,
    Baseline,
}

impl FeatureSource {
    pub fn key(self) -> &'static str {
        match self {
            Self::Embedding => "embedding",
            Self::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embedding" | "embeddings" => Some(Self::Embedding),
            "baseline" | "handcrafted" => Some(Self::Baseline),
            _ => None,
        }
    }
}

/// Sweep settings for `reproduce-table`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableConfig {
    /// Families for the representation, frame-size and kernel sweeps.
    pub families: Vec<Family>,
    pub frame_sizes: Vec<usize>,
    /// Flat-tail counts for the kernel-shape sweep.
    pub flat_tails: Vec<usize>,
    /// Frame length used by the kernel-shape sweep.
    pub kernel_frame: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            families: vec![Family::DS3, Family::DS4, Family::DM2],
            frame_sizes: vec![512, 256, 128],
            flat_tails: vec![0, 1, 2],
            kernel_frame: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Stage seeds: data = seed, train = seed + 1, forest = seed + 2,
    /// splits = seed + 3.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureSource,
    pub forest: ForestConfig,
    pub eval: EvalConfig,
    pub table: TableConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            features: FeatureSource::Embedding,
            forest: ForestConfig::default(),
            eval: EvalConfig::default(),
            table: TableConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn data_seed(&self) -> u64 {
        self.seed
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn forest_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    /// Reads a JSON config; absent fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json()).map_err(Error::io(&path))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.n_loops < 2 {
            return Err(Error::config("dataset.n_loops", "must be at least 2"));
        }
        if self.eval.split_by == SplitBy::Loop && d.n_loops < MIN_GROUPS {
            return Err(Error::config(
                "dataset.n_loops",
                format!("grouped splitting needs at least {MIN_GROUPS} loops"),
            ));
        }
        if d.thin == 0 {
            return Err(Error::config("dataset.thin", "must be at least 1"));
        }
        if d.sample_rate < 8_000 {
            return Err(Error::config(
                "dataset.sample_rate",
                "must be at least 8000 Hz",
            ));
        }
        if !(d.duration_s > 0.0 && d.duration_s <= 60.0) {
            return Err(Error::config("dataset.duration_s", "must lie in (0, 60]"));
        }
        self.preprocess.validate()?;
        if !self.model.variant.accepts(self.preprocess.representation) {
            return Err(Error::config(
                "model.variant",
                format!(
                    "{} does not accept {} input",
                    self.model.variant.key(),
                    self.preprocess.representation.label()
                ),
            ));
        }
        self.model.spec(1).validate()?;
        if self.model.flat_tail > self.model.spec(1).conv_blocks.len() {
            return Err(Error::config(
                "model.flat_tail",
                "exceeds the number of conv blocks",
            ));
        }
        self.train.validate()?;
        self.forest.validate()?;
        self.eval.validate()?;
        if self.table.families.is_empty() {
            return Err(Error::config("table.families", "must not be empty"));
        }
        if self.table.frame_sizes.is_empty() {
            return Err(Error::config("table.frame_sizes", "must not be empty"));
        }
        if let Some(f) = self
            .table
            .frame_sizes
            .iter()
            .find(|f| !f.is_power_of_two() || **f < 8)
        {
            return Err(Error::config(
                "table.frame_sizes",
                format!("{f} is not a power of two ≥ 8"),
            ));
        }
        Ok(())
    }
}
