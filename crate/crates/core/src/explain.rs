//! Grad-CAM, Seg-Grad-CAM, heat-map normalization and overlay rendering.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::data::Slice8;
use crate::error::{Error, Result};
use crate::model::{select_probe_layer, LayerGraph, ModelKind, ProbeLayer};
use crate::ops::resample::{resize_nd, UpsampleMode};
use crate::tensor::{Element, Tensor};

/// Default Seg-Grad-CAM probe of the U-Net.
pub const SEG_DEFAULT_PROBE: &str = "bottleneck";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    Max,
    None,
}

/// Which class score a classifier CAM explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTarget {
    /// The logit itself (evidence for cad).
    Positive,
    /// The negated logit (evidence for normal).
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapProvenance {
    pub model_kind: ModelKind,
    pub probe: String,
    pub target: String,
    pub normalization: NormalizeMode,
}

/// Class activation map at the probe grid and at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Shape equals the probe layer's spatial shape.
    pub raw: Tensor<f32>,
    /// Shape equals the input's spatial shape.
    pub upsampled: Tensor<f32>,
    pub provenance: HeatmapProvenance,
    /// The raw map is identically zero.
    pub zero: bool,
    /// The raw map is constant over the grid.
    pub constant: bool,
}

/// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of `dScore/dA_k`.
///
/// Both tensors are `[1, K, s..]`; the result has shape `[s..]`.
pub fn cam_from_activations<T: Element>(activations: &Tensor<T>, gradients: &Tensor<T>) -> Result<Tensor<T>> {
    activations.expect_same_shape(gradients, "grad-cam")?;
    let shape = activations.shape();
    if shape.len() < 3 || shape[0] != 1 {
        return Err(Error::shape(format!("probe activations {shape:?} have no spatial extent")));
    }
    let k = shape[1];
    let plane: usize = shape[2..].iter().product();
    let (a, g) = (activations.data(), gradients.data());
    let mut map = vec![T::zero(); plane];
    let inv = T::from_f64(1.0 / plane as f64);
    for c in 0..k {
        let off = c * plane;
        let alpha = g[off..off + plane].iter().copied().sum::<T>() * inv;
        for q in 0..plane {
            map[q] = map[q] + alpha * a[off + q];
        }
    }
    for v in &mut map {
        *v = v.max(T::zero());
    }
    Tensor::new(&shape[2..], map)
}

fn check_single(model_dims: &[usize], input: &Tensor<f32>) -> Result<()> {
    if input.rank() != model_dims.len() + 1 || input.shape()[0] != 1 || input.shape()[1..] != *model_dims {
        return Err(Error::shape(format!(
            "explanation input {:?} must be a single sample [1, {model_dims:?}]",
            input.shape()
        )));
    }
    Ok(())
}

/// Grad-CAM for an arbitrary scalar score built on top of the forward tape.
///
/// `score` receives the tape and the model output variable and returns the
/// scalar to explain. The forward pass runs in inference mode.
pub fn grad_cam_with_score<F>(
    model: &LayerGraph<f32>,
    input: &Tensor<f32>,
    probe_node: usize,
    score: F,
) -> Result<(Tensor<f32>, Tensor<f32>)>
where
    F: FnOnce(&mut Tape<f32>, Var, &[Var]) -> Result<Var>,
{
    check_single(&model.signature().dims(), input)?;
    let mut pass = model.forward_infer(input)?;
    let probe = *pass.vars.get(probe_node).ok_or_else(|| Error::invalid(format!("no node {probe_node}")))?;
    if pass.tape.value(probe).rank() < 3 {
        return Err(Error::invalid(format!(
            "probe `{}` has no spatial extent",
            model.nodes()[probe_node].label
        )));
    }
    let s = score(&mut pass.tape, pass.output, &pass.vars)?;
    let grads = pass.tape.gradients(s)?;
    let acts = pass.tape.value(probe);
    let g = match grads.get(probe) {
        Some(g) => g.clone(),
        None => acts.zeros_like(),
    };
    let raw = cam_from_activations(acts, &g)?;
    let mut shape = vec![1, 1];
    shape.extend_from_slice(raw.shape());
    let up = resize_nd(&raw.clone().reshape(&shape)?, &input.shape()[2..], UpsampleMode::Linear)?;
    let up = up.reshape(&input.shape()[2..])?;
    Ok((raw, up))
}

fn flags(raw: &Tensor<f32>) -> (bool, bool) {
    let (lo, hi) = (raw.min_value(), raw.max_value());
    (hi == 0.0, lo == hi)
}

/// Grad-CAM of a residual classifier at one of its probe layers.
pub fn grad_cam(model: &LayerGraph<f32>, input: &Tensor<f32>, probe: ProbeLayer, target: ClassTarget) -> Result<Heatmap> {
    let node = select_probe_layer(model, probe)?;
    let (raw, upsampled) = grad_cam_with_score(model, input, node, |tape, out, _| {
        let s = tape.sum(out);
        Ok(match target {
            ClassTarget::Positive => s,
            ClassTarget::Negative => tape.scale(s, -1.0),
        })
    })?;
    let (zero, constant) = flags(&raw);
    Ok(Heatmap {
        raw,
        upsampled,
        provenance: HeatmapProvenance {
            model_kind: model.kind(),
            probe: probe.as_str().to_string(),
            target: format!("{target:?}").to_lowercase(),
            normalization: NormalizeMode::None,
        },
        zero,
        constant,
    })
}

/// Pixels whose logits form the Seg-Grad-CAM score.
#[derive(Debug, Clone, PartialEq)]
pub enum PixelSet {
    All,
    /// Row-major membership over the input image.
    Mask(Vec<bool>),
}

/// Seg-Grad-CAM: Grad-CAM of `sum over M of the class-c logit`.
pub fn seg_grad_cam(
    model: &LayerGraph<f32>,
    input: &Tensor<f32>,
    class: usize,
    pixels: &PixelSet,
    probe: &str,
) -> Result<Heatmap> {
    if model.kind() != ModelKind::Unet2d {
        return Err(Error::invalid("seg-grad-cam needs the two-class segmenter"));
    }
    let node = model.probe(probe).ok_or_else(|| Error::invalid(format!("model has no `{probe}` probe")))?;
    let logits_node = model.probe("logits").ok_or_else(|| Error::invalid("model has no `logits` probe"))?;
    let plane: usize = model.signature().spatial.iter().product();
    let members: Vec<bool> = match pixels {
        PixelSet::All => vec![true; plane],
        PixelSet::Mask(m) if m.len() == plane => m.clone(),
        PixelSet::Mask(m) => {
            return Err(Error::shape(format!("pixel set has {} entries, image has {plane}", m.len())));
        }
    };
    if !members.iter().any(|&b| b) {
        return Err(Error::invalid("seg-grad-cam pixel set is empty"));
    }
    let (raw, upsampled) = grad_cam_with_score(model, input, node, |tape, _, vars| {
        let logits = vars[logits_node];
        let shape = tape.value(logits).shape().to_vec();
        if class >= shape[1] {
            return Err(Error::invalid(format!("class {class} out of range for {} classes", shape[1])));
        }
        let mut w = Tensor::zeros(&shape)?;
        for (q, _) in members.iter().enumerate().filter(|(_, &b)| b) {
            w.data_mut()[class * plane + q] = 1.0;
        }
        tape.weighted_sum(logits, w)
    })?;
    let (zero, constant) = flags(&raw);
    if constant {
        log::warn!("seg-grad-cam map is constant over the probe grid");
    }
    Ok(Heatmap {
        raw,
        upsampled,
        provenance: HeatmapProvenance {
            model_kind: model.kind(),
            probe: probe.to_string(),
            target: format!("class{class}"),
            normalization: NormalizeMode::None,
        },
        zero,
        constant,
    })
}

/// Divides by the maximum in `Max` mode. Identically zero maps pass through
/// unchanged; the flag reports that case.
pub fn normalize_heatmap(map: &Tensor<f32>, mode: NormalizeMode) -> (Tensor<f32>, bool) {
    let max = map.max_value();
    let zero = max <= 0.0;
    match mode {
        NormalizeMode::Max if !zero => (map.map(|v| v / max), false),
        _ => (map.clone(), zero),
    }
}

/// Location of the map maximum. When the maximum is attained on several
/// elements (a plateau after upsampling) the rounded centroid of those
/// elements is returned.
pub fn heatmap_peak(map: &Tensor<f32>) -> Vec<usize> {
    let max = map.max_value();
    let strides = map.strides();
    let mut sum = vec![0.0f64; map.rank()];
    let mut count = 0usize;
    for (i, &v) in map.data().iter().enumerate() {
        if v == max {
            let mut r = i;
            for (d, s) in strides.iter().enumerate() {
                sum[d] += (r / s) as f64;
                r %= s;
            }
            count += 1;
        }
    }
    sum.iter().map(|s| (s / count as f64).round() as usize).collect()
}

/// Index `index` along the first axis of a `[D, H, W]` map.
pub fn map_slice(map: &Tensor<f32>, index: usize) -> Result<Tensor<f32>> {
    if map.rank() != 3 {
        return Err(Error::shape(format!("expected a volumetric map, got {:?}", map.shape())));
    }
    let [d, h, w] = [map.shape()[0], map.shape()[1], map.shape()[2]];
    if index >= d {
        return Err(Error::invalid(format!("slice index {index} out of range for depth {d}")));
    }
    Tensor::new(&[h, w], map.data()[index * h * w..(index + 1) * h * w].to_vec())
}

/// The shipped 256-entry blue-to-red table.
pub fn colormap() -> &'static [[u8; 3]; 256] {
    static TABLE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let text = include_str!("../assets/colormap_blue_red.txt");
        let mut table = [[0u8; 3]; 256];
        let rows = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut n = 0;
        for (i, line) in rows.enumerate() {
            let v: Vec<u8> = line.split_whitespace().map(|t| t.parse().expect("colormap entry")).collect();
            table[i] = [v[0], v[1], v[2]];
            n += 1;
        }
        assert_eq!(n, 256, "colormap asset must have 256 entries");
        table
    })
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Alpha-blends the colormapped `map` (values in `[0, 1]`) over a grayscale slice.
pub fn render_overlay(map: &Tensor<f32>, underlay: &Slice8, alpha: f64) -> Result<RgbImage> {
    if map.shape() != [underlay.height, underlay.width] {
        return Err(Error::shape(format!(
            "map {:?} does not match underlay {}x{}",
            map.shape(),
            underlay.height,
            underlay.width
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let table = colormap();
    let mut data = Vec::with_capacity(3 * map.len());
    for (&v, &g) in map.data().iter().zip(&underlay.data) {
        let idx = crate::data::quantize(v.clamp(0.0, 1.0) as f64 * 255.0) as usize;
        for c in table[idx] {
            data.push(crate::data::quantize((1.0 - alpha) * g as f64 + alpha * c as f64));
        }
    }
    Ok(RgbImage { height: underlay.height, width: underlay.width, data })
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Hex SHA-256 of the architecture descriptor and parameter values.
pub fn model_hash(model: &LayerGraph<f32>) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.descriptor())?);
    for (_, name, p) in model.params().iter() {
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Provenance written next to every overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySidecar {
    pub model_hash: String,
    pub provenance: HeatmapProvenance,
    pub raw_shape: Vec<usize>,
    pub raw_min: f32,
    pub raw_max: f32,
    pub raw_mean: f32,
    /// Peak of the upsampled map in input coordinates.
    pub peak: Vec<usize>,
    pub slice_index: Option<usize>,
    pub alpha: f64,
    pub zero_map: bool,
}

impl OverlaySidecar {
    pub fn new(model_hash: String, heatmap: &Heatmap, normalization: NormalizeMode, slice_index: Option<usize>, alpha: f64) -> Self {
        let raw = &heatmap.raw;
        OverlaySidecar {
            model_hash,
            provenance: HeatmapProvenance { normalization, ..heatmap.provenance.clone() },
            raw_shape: raw.shape().to_vec(),
            raw_min: raw.min_value(),
            raw_max: raw.max_value(),
            raw_mean: raw.sum() / raw.len() as f32,
            peak: heatmap_peak(&heatmap.upsampled),
            slice_index,
            alpha,
            zero_map: heatmap.zero,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gradients_give_relu_of_activation() {
        let a = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = Tensor::ones(&[1, 1, 2, 2]).unwrap();
        let cam = cam_from_activations(&a, &g).unwrap();
        assert_eq!(cam.data(), &[1.0, 0.0, 3.0, 0.5]);
        assert_eq!(cam.shape(), &[2, 2]);
    }

    #[test]
    fn negative_gradient_on_nonnegative_map_is_zero() {
        let a = Tensor::<f64>::new(&[1, 1, 3], vec![1.0, 0.0, 2.0]).unwrap();
        let g = Tensor::full(&[1, 1, 3], -1.0).unwrap();
        assert!(cam_from_activations(&a, &g).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization() {
        let m = Tensor::new(&[2], vec![4.0f32, 1.0]).unwrap();
        assert_eq!(normalize_heatmap(&m, NormalizeMode::Max).0.data(), &[1.0, 0.25]);
        let z = Tensor::<f32>::zeros(&[3]).unwrap();
        let (out, flag) = normalize_heatmap(&z, NormalizeMode::Max);
        assert!(flag);
        assert_eq!(out, z);
    }

    #[test]
    fn plateau_peak_is_centroid() {
        let m = Tensor::new(&[5], vec![1.0f32, 3.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(heatmap_peak(&m), vec![2]);
    }

    #[test]
    fn zero_map_shows_table_entry_zero() {
        let map = Tensor::<f32>::zeros(&[1, 1]).unwrap();
        let under = Slice8::filled(1, 1, 100);
        let img = render_overlay(&map, &under, 0.5).unwrap();
        let c = colormap()[0];
        let expect: Vec<u8> = c.iter().map(|&v| crate::data::quantize(50.0 + 0.5 * v as f64)).collect();
        assert_eq!(img.data, expect);
    }

    #[test]
    fn slice_index_checked() {
        let m = Tensor::<f32>::zeros(&[2, 3, 3]).unwrap();
        assert!(map_slice(&m, 2).is_err());
        assert_eq!(map_slice(&m, 1).unwrap().shape(), &[3, 3]);
    }
}
