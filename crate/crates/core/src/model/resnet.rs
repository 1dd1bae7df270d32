//! Bottleneck residual classifiers (ResNet-50 layout) in 2D and 3D.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::graph::{GraphBuilder, InputSignature, LayerGraph, ModelKind};
use crate::tensor::Element;

/// Rational channel-width multiplier, written `num/den` (e.g. `1/4`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthMultiplier {
    pub num: u32,
    pub den: u32,
}

impl WidthMultiplier {
    pub const ONE: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("width multiplier {num}/{den} must be positive")));
        }
        Ok(WidthMultiplier { num, den })
    }

    pub fn apply(&self, channels: usize) -> usize {
        (channels * self.num as usize / self.den as usize).max(1)
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("width multiplier `{s}` is not of the form `n/d` or `n`"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        WidthMultiplier::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

impl Serialize for WidthMultiplier {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WidthMultiplier {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResnetConfig {
    /// Number of spatial dims: 2 or 3.
    pub dim: usize,
    /// Bottleneck blocks in stages 2-5.
    pub blocks: [usize; 4],
    pub base_width: usize,
    pub width_multiplier: WidthMultiplier,
    pub input: InputSignature,
    pub seed: u64,
}

impl ResnetConfig {
    pub fn resnet50_2d(spatial: [usize; 2]) -> Self {
        ResnetConfig {
            dim: 2,
            blocks: [3, 4, 6, 3],
            base_width: 64,
            width_multiplier: WidthMultiplier::ONE,
            input: InputSignature::new(1, &spatial),
            seed: 0,
        }
    }

    pub fn resnet50_3d(spatial: [usize; 3]) -> Self {
        ResnetConfig { dim: 3, input: InputSignature::new(1, &spatial), ..Self::resnet50_2d([1, 1]) }
    }

    pub fn with_width(mut self, m: WidthMultiplier) -> Self {
        self.width_multiplier = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Config(format!("resnet dim must be 2 or 3, got {}", self.dim)));
        }
        if self.input.spatial.len() != self.dim {
            return Err(Error::Config(format!(
                "input spatial extents {:?} do not have {} dims",
                self.input.spatial, self.dim
            )));
        }
        if self.input.channels == 0 || self.input.spatial.contains(&0) {
            return Err(Error::Config("input extents must be at least 1".into()));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config(format!("every stage needs at least one block, got {:?}", self.blocks)));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stage labels use the conventional numbering: the stem is stage 1, the
/// bottleneck stages are 2 through 5.
pub const FIRST_STAGE: usize = 2;

fn check_not_collapsed<T: Element>(b: &GraphBuilder<T>, node: usize, stage: &str) -> Result<()> {
    if b.shape(node)[1..].contains(&1) {
        return Err(Error::Shape(format!(
            "spatial extents {:?} collapse below 1 when downsampled in {stage}",
            &b.shape(node)[1..]
        )));
    }
    Ok(())
}

/// Builds the bottleneck residual classifier with a single-logit head.
///
/// Stem: 7-wide conv stride 2, norm, relu, 3-wide max pool stride 2. Stages
/// 3-5 halve every spatial extent in their first block (stride on the
/// 3-wide conv). Shortcuts get a 1-wide projection conv + norm exactly where
/// the block changes shape.
pub fn build_resnet<T: Element>(config: &ResnetConfig) -> Result<LayerGraph<T>> {
    config.validate()?;
    let kind = if config.dim == 2 { ModelKind::Resnet2d } else { ModelKind::Resnet3d };
    let mut b = GraphBuilder::<T>::new(kind, config.input.clone(), config.seed);
    let w = |c: usize| config.width_multiplier.apply(c);
    let base = config.base_width;

    let stem = b.conv("stem.conv", GraphBuilder::<T>::INPUT, w(base), 7, 2, 3, false)?;
    b.set_probe("first", stem)?;
    let mut x = b.batch_norm("stem.bn", stem)?;
    x = b.relu("stem.relu", x)?;
    check_not_collapsed(&b, x, "stem pooling")?;
    x = b.max_pool("stem.pool", x, 3, 2, 1)?;

    for (i, &count) in config.blocks.iter().enumerate() {
        let stage = FIRST_STAGE + i;
        let mid = w(base << i);
        let out = w((base << i) * 4);
        let mut last_conv = 0;
        for blk in 1..=count {
            let p = format!("stage{stage}.block{blk}");
            let stride = if blk == 1 && stage > FIRST_STAGE { 2 } else { 1 };
            if stride == 2 {
                check_not_collapsed(&b, x, &format!("stage{stage}"))?;
            }
            let input = x;
            let mut y = b.conv(&format!("{p}.conv1"), input, mid, 1, 1, 0, false)?;
            y = b.batch_norm(&format!("{p}.bn1"), y)?;
            y = b.relu(&format!("{p}.relu1"), y)?;
            y = b.conv(&format!("{p}.conv2"), y, mid, 3, stride, 1, false)?;
            y = b.batch_norm(&format!("{p}.bn2"), y)?;
            y = b.relu(&format!("{p}.relu2"), y)?;
            last_conv = b.conv(&format!("{p}.conv3"), y, out, 1, 1, 0, false)?;
            y = b.batch_norm(&format!("{p}.bn3"), last_conv)?;
            let shortcut = if b.shape(input) != b.shape(y) {
                let s = b.shortcut_conv(&format!("{p}.proj"), input, out, stride)?;
                b.batch_norm(&format!("{p}.proj_bn"), s)?
            } else {
                input
            };
            y = b.add(&format!("{p}.add"), y, shortcut)?;
            x = b.relu(&format!("{p}.relu"), y)?;
        }
        match stage {
            3 => b.set_probe("middle", last_conv)?,
            5 => b.set_probe("last", last_conv)?,
            _ => {}
        }
    }

    let pooled = b.global_avg_pool("head.gap", x)?;
    let logit = b.dense("head.dense", pooled, 1)?;
    b.set_probe("logit", logit)?;
    b.finish(logit)
}
