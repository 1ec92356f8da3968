//! Structured run configuration (TOML on disk) and the builders that turn a
//! validated config into datasets and a model pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoview::{AugmentConfig, LocalisationNet, ViewBounds};
use crate::contrast::ContrastConfig;
use crate::datasets::{generate_synthetic, load_image_folder, Dataset, SyntheticSpec};
use crate::encoder::{Backbone, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::protohead::SimilarityMetric;
use crate::trainer::{Pipeline, TrainConfig};

/// Where the images come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Procedural shapes dataset; fully reproducible from the spec.
    Synthetic { spec: SyntheticSpec },
    /// A directory of `<class>/<image>` files, resized on load.
    Folder { path: PathBuf, image_size: usize },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            spec: SyntheticSpec {
                num_coarse_classes: 18,
                subcats_per_class: 1,
                samples_per_subcat: 80,
                image_size: 32,
                noise_std: 0.03,
                seed: 9001,
                hue_by_subcat: false,
            },
        }
    }
}

/// Localisation-network architecture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub channels: Vec<usize>,
    pub bounds: ViewBounds,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig { channels: vec![8, 16], bounds: ViewBounds::default() }
    }
}

/// Meta-test settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_way: 5, k_shot: 1, m_query: 16, n_episodes: 600, seed: 1234 }
    }
}

/// Complete description of one run. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Number of trailing classes reserved for meta-test episodes.
    pub holdout_classes: usize,
    pub encoder: EncoderConfig,
    pub view: ViewConfig,
    pub similarity: SimilarityMetric,
    pub contrast: ContrastConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            holdout_classes: 5,
            encoder: EncoderConfig::default(),
            view: ViewConfig::default(),
            similarity: SimilarityMetric::default(),
            contrast: ContrastConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize error: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic { spec } => spec.validate()?,
            DatasetConfig::Folder { image_size, .. } => {
                if *image_size == 0 {
                    return Err(Error::Config("dataset image_size must be positive".into()));
                }
            }
        }
        self.encoder.validate()?;
        self.view.bounds.validate()?;
        if self.view.channels.is_empty() {
            return Err(Error::Config("view.channels must not be empty".into()));
        }
        self.similarity.validate()?;
        self.contrast.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.eval.n_way < 2 || self.eval.k_shot == 0 || self.eval.m_query == 0 {
            return Err(Error::Config("eval episode shape invalid".into()));
        }
        if self.eval.n_episodes == 0 {
            return Err(Error::Config("eval.n_episodes must be positive".into()));
        }
        let ds_size = match &self.dataset {
            DatasetConfig::Synthetic { spec } => spec.image_size,
            DatasetConfig::Folder { image_size, .. } => *image_size,
        };
        if ds_size != self.encoder.image_size {
            return Err(Error::Config(format!(
                "dataset image size {ds_size} does not match encoder image size {}",
                self.encoder.image_size
            )));
        }
        Ok(())
    }

    /// Build the model stack described by this config.
    pub fn pipeline(&self) -> Result<Pipeline> {
        Ok(Pipeline {
            encoder: EncoderModel::from_config(&self.encoder)?,
            locnet: LocalisationNet {
                trunk: Backbone::Conv {
                    in_channels: 3,
                    channels: self.view.channels.clone(),
                    activation: Activation::Relu,
                    use_norm: true,
                },
                bounds: self.view.bounds,
            },
            similarity: self.similarity,
            contrast: self.contrast.clone(),
            augment: self.augment.clone(),
        })
    }

    /// Materialize the dataset and split it into meta-train / meta-test class
    /// partitions (the last `holdout_classes` classes are held out).
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let full = match &self.dataset {
            DatasetConfig::Synthetic { spec } => generate_synthetic(spec)?,
            DatasetConfig::Folder { path, image_size } => load_image_folder(path, *image_size)?,
        };
        split_holdout(&full, self.holdout_classes)
    }
}

/// Split a dataset by class id: the last `holdout` classes become the
/// meta-test partition. With `holdout == 0` both partitions are the full set
/// (useful for smoke runs only; meta-test classes should be disjoint).
pub fn split_holdout(full: &Dataset, holdout: usize) -> Result<(Dataset, Dataset)> {
    let n = full.num_classes();
    if holdout == 0 {
        log::warn!("holdout_classes = 0: evaluating on training classes");
        return Ok((full.clone(), full.clone()));
    }
    if holdout >= n {
        return Err(Error::Config(format!(
            "holdout_classes {holdout} must leave at least one training class (have {n})"
        )));
    }
    let train_ids: Vec<usize> = (0..n - holdout).collect();
    let test_ids: Vec<usize> = (n - holdout..n).collect();
    Ok((full.select_classes(&train_ids)?, full.select_classes(&test_ids)?))
}
