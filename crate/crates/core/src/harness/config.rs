//! Experiment configuration: one JSON document, versioned, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::PromptMode;
use crate::bilevel::TrainConfig;
use crate::datasets::{glyph_split, load_dataset, load_idx, IdxOptions, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{presets, ModelSpec};
use crate::surrogate::{check_disjoint, heldout_pipelines, pipeline_bank, TransformPipeline};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Glyphs {
        #[serde(default = "d200")]
        train_per_class: usize,
        #[serde(default = "d100")]
        test_per_class: usize,
        #[serde(default = "d10")]
        num_classes: usize,
        #[serde(default = "d16")]
        resolution: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        resize_rgb32: bool,
    },
    Bsdg {
        train: PathBuf,
        test: PathBuf,
    },
}

fn d200() -> usize {
    200
}
fn d100() -> usize {
    100
}
fn d10() -> usize {
    10
}
fn d16() -> usize {
    16
}
fn d32() -> usize {
    32
}
fn d1() -> usize {
    1
}
fn d5() -> usize {
    5
}
fn d3() -> usize {
    3
}

impl DataConfig {
    fn paths(&self) -> Vec<&Path> {
        match self {
            DataConfig::Glyphs { .. } => vec![],
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
            DataConfig::Bsdg { train, test } => vec![train, test],
        }
    }

    /// Seed for eval-domain synthesis, shared by every training seed.
    pub fn seed(&self) -> u64 {
        match self {
            DataConfig::Glyphs { seed, .. } => *seed,
            _ => 0,
        }
    }

    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DataConfig::Glyphs {
                train_per_class,
                test_per_class,
                num_classes,
                resolution,
                seed,
            } => glyph_split(*train_per_class, *test_per_class, *num_classes, *resolution, *seed),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
                resize_rgb32,
            } => {
                let opts = IdxOptions {
                    limit: *limit,
                    resize_rgb32: *resize_rgb32,
                };
                Ok((load_idx(train_images, train_labels, opts)?, load_idx(test_images, test_labels, opts)?))
            }
            DataConfig::Bsdg { train, test } => Ok((load_dataset(train)?, load_dataset(test)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default = "d5")]
    pub k: usize,
    #[serde(default = "d3")]
    pub m: usize,
    /// Explicit pipelines; `None` takes the first `k` of the built-in bank
    /// truncated to `m` steps.
    #[serde(default)]
    pub pipelines: Option<Vec<TransformPipeline>>,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            k: 5,
            m: 3,
            pipelines: None,
        }
    }
}

impl SurrogateConfig {
    pub fn resolve(&self) -> Result<Vec<TransformPipeline>> {
        match &self.pipelines {
            Some(p) => {
                if p.len() != self.k {
                    return Err(Error::config(format!("k = {} but {} pipelines given", self.k, p.len())));
                }
                for q in p {
                    q.validate()?;
                }
                Ok(p.clone())
            }
            None => pipeline_bank(self.k, self.m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub prompt_mode: PromptMode,
    #[serde(default = "d32")]
    pub batch_size: usize,
    /// Size of the source calibration batch for `source-calibrated` mode.
    #[serde(default = "d32")]
    pub calibration_size: usize,
    /// Held-out shift domains; `None` uses the built-in three.
    #[serde(default)]
    pub heldout: Option<Vec<TransformPipeline>>,
    #[serde(default = "d1")]
    pub every_epochs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompt_mode: PromptMode::TestBatch,
            batch_size: 32,
            calibration_size: 32,
            heldout: None,
            every_epochs: 1,
        }
    }
}

impl EvalConfig {
    pub fn resolve_heldout(&self) -> Result<Vec<TransformPipeline>> {
        match &self.heldout {
            Some(h) => {
                for p in h {
                    p.validate()?;
                }
                Ok(h.clone())
            }
            None => Ok(heldout_pipelines()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingConfig {
    /// Write a metrics row every this many steps (epoch ends always log).
    #[serde(default = "d1")]
    pub every_steps: usize,
    /// Record wall-clock milliseconds; off keeps metrics files reproducible.
    #[serde(default)]
    pub wall_clock: bool,
    /// Also checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every_epochs: usize,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        LoggingConfig {
            every_steps: 1,
            wall_clock: false,
            checkpoint_every_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    /// `None` selects the glyph MLP preset sized from the data.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub train: TrainConfig,
    #[serde(default)]
    pub surrogates: SurrogateConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub logging: LoggingConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// Desk-scale glyph benchmark: 10 classes, 2000/1000 at 16x16, K = 5,
    /// m = 3, 20 epochs.
    pub fn glyph_default(output_dir: impl Into<PathBuf>) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::Glyphs {
                train_per_class: 200,
                test_per_class: 100,
                num_classes: 10,
                resolution: 16,
                seed: 0,
            },
            model: None,
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                alpha_theta: 0.05,
                alpha_omega: 0.01,
                schedule: Default::default(),
                inner: Default::default(),
                hypergrad: Default::default(),
                shuffle: true,
                grad_clip: Some(5.0),
            },
            surrogates: SurrogateConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: output_dir.into(),
            logging: LoggingConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for p in self.data.paths() {
            if !p.exists() {
                return Err(Error::config(format!("data file {} does not exist", p.display())));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.eval.batch_size == 0 || self.eval.calibration_size == 0 || self.eval.every_epochs == 0 {
            return Err(Error::config("eval batch_size, calibration_size and every_epochs must be >= 1"));
        }
        if self.logging.every_steps == 0 {
            return Err(Error::config("logging.every_steps must be >= 1"));
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.train.validate()?;
        let training = self.surrogates.resolve()?;
        check_disjoint(&training, &self.eval.resolve_heldout()?)
    }

    pub fn model_for(&self, train: &LabeledDataset) -> Result<ModelSpec> {
        let (_, c, h, w) = train.dims();
        let spec = match &self.model {
            Some(m) => m.clone(),
            None => presets::glyph_mlp([c, h, w], train.num_classes),
        };
        if spec.input != [c, h, w] {
            return Err(Error::config(format!("model input {:?} does not match data {:?}", spec.input, [c, h, w])));
        }
        if spec.num_classes() != train.num_classes {
            return Err(Error::config("model classes do not match the data"));
        }
        spec.validate()?;
        Ok(spec)
    }
}
