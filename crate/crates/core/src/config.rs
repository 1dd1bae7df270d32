//! Run configuration: one TOML document with a section per stage.
//!
//! Unknown keys are rejected with their full path. Every field has a default,
//! so an empty file is a valid configuration. The top-level `seed` drives
//! phantom generation, splitting, weight initialization and batch order; the
//! `train.seed` entry is overwritten with it.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, SplitPlan};
use crate::error::{Error, Result};
use crate::explain::{ClassTarget, NormalizeMode, SEG_DEFAULT_PROBE};
use crate::model::{build_resnet, build_unet, LayerGraph, ProbeLayer, ResnetConfig, UnetConfig, WidthMultiplier};
use crate::phantom::PhantomSpec;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub seed: u64,
    /// Worker cap; kernels are single-threaded so values above 1 change nothing.
    pub threads: usize,
    /// Artifacts of every subcommand go here.
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub phantom: PhantomSection,
    pub preprocess: PreprocessConfig,
    pub split: SplitPlan,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub explain: ExplainSection,
    pub segment: SegmentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            seed: 7,
            threads: 1,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            phantom: PhantomSection::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitPlan::balanced(30, 7, 7),
            model: ModelSection::default(),
            train: TrainConfig { seed: 7, ..TrainConfig::default() },
            explain: ExplainSection::default(),
            segment: SegmentSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Raw dataset root (phantom output, preprocessing input).
    pub raw: PathBuf,
    /// Preprocessed mirror, used for splitting, training and evaluation.
    pub preprocessed: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { raw: PathBuf::from("data/phantoms"), preprocessed: PathBuf::from("data/phantoms-preprocessed") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection { n_normal: 44, n_abnormal: 44, spec: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Resnet2d,
    Resnet3d,
    Unet2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelChoice,
    pub width_multiplier: WidthMultiplier,
    pub base_width: usize,
    pub blocks: [usize; 4],
    pub unet_depth: usize,
    pub unet_base_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelChoice::Resnet3d,
            width_multiplier: WidthMultiplier::new(1, 4).expect("nonzero"),
            base_width: 64,
            blocks: [3, 4, 6, 3],
            unet_depth: 3,
            unet_base_channels: 8,
        }
    }
}

/// `all` expands to first, middle and last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeChoice {
    All,
    First,
    Middle,
    Last,
}

impl ProbeChoice {
    pub fn layers(self) -> Vec<ProbeLayer> {
        match self {
            ProbeChoice::All => ProbeLayer::ALL.to_vec(),
            ProbeChoice::First => vec![ProbeLayer::First],
            ProbeChoice::Middle => vec![ProbeLayer::Middle],
            ProbeChoice::Last => vec![ProbeLayer::Last],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub probe: ProbeChoice,
    pub target: ClassTarget,
    pub normalization: NormalizeMode,
    pub alpha: f64,
    /// Subject to explain; the first test subject when unset.
    pub subject: Option<String>,
    /// Slice rendered from volumetric maps; the map peak slice when unset.
    pub slice: Option<usize>,
    /// Seg-Grad-CAM class (1 = foreground).
    pub seg_class: usize,
    pub seg_probe: String,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            probe: ProbeChoice::All,
            target: ClassTarget::Positive,
            normalization: NormalizeMode::Max,
            alpha: 0.5,
            subject: None,
            slice: None,
            seg_class: 1,
            seg_probe: SEG_DEFAULT_PROBE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    /// Keep every n-th slice of each subject for segmentation training and
    /// validation; evaluation scores every test slice.
    pub slice_stride: usize,
    /// Foreground masks live under `<mask_root>/masks/<id>/`.
    pub mask_root: Option<PathBuf>,
}

impl Default for SegmentSection {
    fn default() -> Self {
        SegmentSection { slice_stride: 1, mask_root: None }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            return Err(Error::Config(format!("explain.alpha {} outside [0, 1]", self.explain.alpha)));
        }
        if self.segment.slice_stride == 0 {
            return Err(Error::Config("segment.slice_stride must be at least 1".into()));
        }
        if self.preprocess.size.contains(&0) || self.preprocess.slices == Some(0) {
            return Err(Error::Config("preprocess extents must be at least 1".into()));
        }
        self.phantom.spec.validate()?;
        self.train.validate()?;
        self.resnet_config().validate()?;
        if self.model.kind == ModelChoice::Unet2d {
            self.unet_config().validate()?;
        }
        Ok(())
    }

    /// Classifier configuration for the preprocessed input geometry.
    pub fn resnet_config(&self) -> ResnetConfig {
        let [h, w] = self.preprocess.size;
        let mut c = match self.model.kind {
            ModelChoice::Resnet2d | ModelChoice::Unet2d => ResnetConfig::resnet50_2d([h, w]),
            ModelChoice::Resnet3d => ResnetConfig::resnet50_3d([self.preprocess.slices.unwrap_or(h), h, w]),
        };
        c.blocks = self.model.blocks;
        c.base_width = self.model.base_width;
        c.with_width(self.model.width_multiplier).with_seed(self.seed)
    }

    pub fn unet_config(&self) -> UnetConfig {
        UnetConfig { seed: self.seed, ..UnetConfig::new(self.model.unet_depth, self.model.unet_base_channels, self.preprocess.size) }
    }

    pub fn build_model(&self) -> Result<LayerGraph<f32>> {
        match self.model.kind {
            ModelChoice::Unet2d => build_unet(&self.unet_config()),
            _ => build_resnet(&self.resnet_config()),
        }
    }

    /// Applies the top-level seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    /// Strict parse; errors name the offending key path and position.
    fn from_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse().map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
