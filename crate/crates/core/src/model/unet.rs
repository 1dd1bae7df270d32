//! Two-class U-Net for 2D slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::{GraphBuilder, InputSignature, LayerGraph, ModelKind};
use crate::ops::{Activation, UpsampleMode};
use crate::tensor::Element;

pub const UNET_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    /// Number of encoder levels (pooling steps).
    pub depth: usize,
    pub base_channels: usize,
    /// Input height and width; the input is single-channel.
    pub spatial: [usize; 2],
    pub seed: u64,
}

impl UnetConfig {
    pub fn new(depth: usize, base_channels: usize, spatial: [usize; 2]) -> Self {
        UnetConfig { depth, base_channels, spatial, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("unet depth and base channels must be at least 1".into()));
        }
        let div = 1usize << self.depth;
        for (d, &s) in self.spatial.iter().enumerate() {
            if s == 0 || s % div != 0 {
                return Err(Error::Config(format!(
                    "unet input extent {s} (dim {d}) is not divisible by 2^{} = {div}",
                    self.depth
                )));
            }
        }
        Ok(())
    }
}

fn conv_block<T: Element>(b: &mut GraphBuilder<T>, prefix: &str, input: usize, channels: usize) -> Result<usize> {
    let mut x = b.conv(&format!("{prefix}.conv1"), input, channels, 3, 1, 1, false)?;
    x = b.batch_norm(&format!("{prefix}.bn1"), x)?;
    x = b.relu(&format!("{prefix}.relu1"), x)?;
    x = b.conv(&format!("{prefix}.conv2"), x, channels, 3, 1, 1, false)?;
    x = b.batch_norm(&format!("{prefix}.bn2"), x)?;
    b.relu(&format!("{prefix}.relu2"), x)
}

/// Encoder of conv blocks + 2x max pool, decoder of nearest 2x upsampling,
/// skip concatenation and conv blocks; 1-wide conv to two class logits
/// followed by a softmax over channels.
///
/// Probes: `bottleneck` (bottleneck block output), `dec1`..`decN` (decoder
/// block outputs, `dec1` at full resolution) and `logits` (pre-softmax).
pub fn build_unet<T: Element>(config: &UnetConfig) -> Result<LayerGraph<T>> {
    config.validate()?;
    let mut b = GraphBuilder::<T>::new(ModelKind::Unet2d, InputSignature::new(1, &config.spatial), config.seed);
    let mut x = GraphBuilder::<T>::INPUT;
    let mut skips = Vec::with_capacity(config.depth);
    for level in 0..config.depth {
        let p = format!("enc{}", level + 1);
        x = conv_block(&mut b, &p, x, config.base_channels << level)?;
        skips.push(x);
        x = b.max_pool(&format!("{p}.pool"), x, 2, 2, 0)?;
    }
    x = conv_block(&mut b, "bottleneck", x, config.base_channels << config.depth)?;
    b.set_probe("bottleneck", x)?;
    for level in (0..config.depth).rev() {
        let p = format!("dec{}", level + 1);
        let up = b.upsample(&format!("{p}.up"), x, 2, UpsampleMode::Nearest)?;
        let cat = b.concat(&format!("{p}.concat"), &[up, skips[level]])?;
        x = conv_block(&mut b, &p, cat, config.base_channels << level)?;
        b.set_probe(&p, x)?;
    }
    let logits = b.conv("head.logits", x, UNET_CLASSES, 1, 1, 0, true)?;
    b.set_probe("logits", logits)?;
    let out = b.activation("head.softmax", logits, Activation::SoftmaxChannel)?;
    b.finish(out)
}
