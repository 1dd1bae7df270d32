//! Layer graphs: the node list, its parameters and running statistics.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Activation, UpsampleMode};
use crate::tensor::{Element, Tensor};

/// Descriptor format written into checkpoints and `.arch.json` files.
pub const DESCRIPTOR_VERSION: u32 = 1;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Resnet2d,
    Resnet3d,
    Unet2d,
    Custom,
}

/// Per-sample input shape: channels plus spatial extents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSignature {
    pub channels: usize,
    pub spatial: Vec<usize>,
}

impl InputSignature {
    pub fn new(channels: usize, spatial: &[usize]) -> Self {
        InputSignature { channels, spatial: spatial.to_vec() }
    }

    /// `[C, spatial..]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.channels];
        d.extend_from_slice(&self.spatial);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Vec<usize>,
        bias: bool,
        /// Projection on a residual shortcut (not counted as a main-path layer).
        #[serde(default)]
        shortcut: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Activation {
        kind: Activation,
    },
    MaxPool {
        window: Vec<usize>,
        stride: Vec<usize>,
        padding: Vec<usize>,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Add,
    ConcatChannels,
    Upsample {
        factor: Vec<usize>,
        mode: UpsampleMode,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Activation { kind: Activation::Relu } => "relu",
            LayerKind::Activation { kind: Activation::Sigmoid } => "sigmoid",
            LayerKind::Activation { kind: Activation::SoftmaxChannel } => "softmax",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Add => "add",
            LayerKind::ConcatChannels => "concat",
            LayerKind::Upsample { .. } => "upsample",
        }
    }

    /// Convolutions on the main path and dense layers.
    pub fn is_weighted_layer(&self) -> bool {
        matches!(self, LayerKind::Conv { shortcut: false, .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub label: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

/// Serializable architecture description (no parameter values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub format_version: u32,
    pub kind: ModelKind,
    pub signature: InputSignature,
    pub nodes: Vec<Node>,
    pub output: usize,
    pub probes: BTreeMap<String, usize>,
}

/// Result of a forward pass: the tape plus the tape variable of every node.
pub struct ForwardPass<T: Element> {
    pub tape: Tape<T>,
    pub vars: Vec<Var>,
    pub output: Var,
}

impl<T: Element> ForwardPass<T> {
    pub fn output_value(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }

    pub fn node_value(&self, node: usize) -> &Tensor<T> {
        self.tape.value(self.vars[node])
    }
}

/// A model: directed acyclic layer graph with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph<T: Element = f32> {
    kind: ModelKind,
    signature: InputSignature,
    nodes: Vec<Node>,
    output: usize,
    probes: BTreeMap<String, usize>,
    params: ParamStore<T>,
    /// Running mean / variance of every batch norm, keyed `<label>.running_mean|var`.
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Element> LayerGraph<T> {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn signature(&self) -> &InputSignature {
        &self.signature
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output_node(&self) -> usize {
        self.output
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.buffers
    }

    pub fn probes(&self) -> &BTreeMap<String, usize> {
        &self.probes
    }

    pub fn probe(&self, name: &str) -> Option<usize> {
        self.probes.get(name).copied()
    }

    pub fn node_by_label(&self, label: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.label == label)
    }

    pub fn descriptor(&self) -> Descriptor {
        Descriptor {
            format_version: DESCRIPTOR_VERSION,
            kind: self.kind,
            signature: self.signature.clone(),
            nodes: self.nodes.clone(),
            output: self.output,
            probes: self.probes.clone(),
        }
    }

    /// Rebuilds a graph from its descriptor with freshly initialized parameters.
    pub fn from_descriptor(desc: &Descriptor, seed: u64) -> Result<Self> {
        if desc.format_version != DESCRIPTOR_VERSION {
            return Err(Error::Config(format!(
                "descriptor format version {} is not supported (expected {DESCRIPTOR_VERSION})",
                desc.format_version
            )));
        }
        let mut b = GraphBuilder::new(desc.kind, desc.signature.clone(), seed);
        for node in desc.nodes.iter().skip(1) {
            if node.id != b.nodes.len() {
                return Err(Error::Config(format!("descriptor node ids out of order at `{}`", node.label)));
            }
            b.push(&node.label, node.kind.clone(), node.inputs.clone())?;
        }
        for (k, &v) in &desc.probes {
            b.set_probe(k, v)?;
        }
        b.finish(desc.output)
    }

    /// Same architecture and values in another element type.
    pub fn cast<U: Element>(&self) -> LayerGraph<U> {
        LayerGraph {
            kind: self.kind,
            signature: self.signature.clone(),
            nodes: self.nodes.clone(),
            output: self.output,
            probes: self.probes.clone(),
            params: self.params.cast(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Propagated per-sample shapes `[C, spatial..]` of every node.
    pub fn infer_shapes(&self, signature: &InputSignature) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&i| &shapes[i]).collect();
            let s = node_shape(&node.kind, &ins, signature)
                .map_err(|e| Error::Shape(format!("at `{}`: {e}", node.label)))?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let dims = self.signature.dims();
        if batch.rank() != dims.len() + 1 || batch.shape()[1..] != dims[..] {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match input signature [N, {}]",
                batch.shape(),
                dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    /// Runs the graph. Train mode normalizes with batch statistics and
    /// updates running statistics; infer mode uses the running statistics.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let (pass, stats) = self.run(batch, mode)?;
        if mode == Mode::Train {
            let m = T::from_f64(BN_MOMENTUM);
            for (label, mean, var, count) in stats {
                let unbias = T::from_f64(count as f64 / (count as f64 - 1.0));
                let rm = self.buffers.get_mut(&format!("{label}.running_mean")).expect("running mean buffer");
                for (r, &b) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                let rv = self.buffers.get_mut(&format!("{label}.running_var")).expect("running var buffer");
                for (r, &b) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - m) * *r + m * b * unbias;
                }
            }
        }
        Ok(pass)
    }

    /// Inference-mode forward pass; never mutates the model.
    pub fn forward_infer(&self, batch: &Tensor<T>) -> Result<ForwardPass<T>> {
        Ok(self.run(batch, Mode::Infer)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, batch: &Tensor<T>, mode: Mode) -> Result<(ForwardPass<T>, Vec<(String, Vec<T>, Vec<T>, usize)>)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut stats = Vec::new();
        for node in &self.nodes {
            let x = |i: usize| vars[node.inputs[i]];
            let label = &node.label;
            let v = match &node.kind {
                LayerKind::Input => tape.constant(batch.clone()),
                LayerKind::Conv { stride, padding, bias, .. } => {
                    let w = tape.param(&self.params, self.params.id(&format!("{label}.weight"))?);
                    let b = if *bias {
                        Some(tape.param(&self.params, self.params.id(&format!("{label}.bias"))?))
                    } else {
                        None
                    };
                    tape.conv(x(0), w, b, stride, padding)?
                }
                LayerKind::BatchNorm { .. } => {
                    let g = tape.param(&self.params, self.params.id(&format!("{label}.gamma"))?);
                    let b = tape.param(&self.params, self.params.id(&format!("{label}.beta"))?);
                    match mode {
                        Mode::Train => {
                            let input = x(0);
                            let shape = tape.value(input).shape();
                            let count = shape[0] * shape[2..].iter().product::<usize>();
                            let (v, mean, var) = tape.batch_norm_train(input, g, b, BN_EPS)?;
                            stats.push((label.clone(), mean, var, count));
                            v
                        }
                        Mode::Infer => {
                            let rm = &self.buffers[&format!("{label}.running_mean")];
                            let rv = &self.buffers[&format!("{label}.running_var")];
                            tape.batch_norm_infer(x(0), g, b, rm, rv, BN_EPS)?
                        }
                    }
                }
                LayerKind::Activation { kind } => tape.activation(x(0), *kind)?,
                LayerKind::MaxPool { window, stride, padding } => tape.max_pool(x(0), window, stride, padding)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(x(0))?,
                LayerKind::Dense { .. } => {
                    let w = tape.param(&self.params, self.params.id(&format!("{label}.weight"))?);
                    let b = tape.param(&self.params, self.params.id(&format!("{label}.bias"))?);
                    tape.dense(x(0), w, b)?
                }
                LayerKind::Add => tape.add(x(0), x(1))?,
                LayerKind::ConcatChannels => {
                    let ins: Vec<Var> = node.inputs.iter().map(|&i| vars[i]).collect();
                    tape.concat_channels(&ins)?
                }
                LayerKind::Upsample { factor, mode } => tape.upsample(x(0), factor, *mode)?,
            };
            vars.push(v);
        }
        let output = vars[self.output];
        Ok((ForwardPass { tape, vars, output }, stats))
    }
}

fn node_shape(kind: &LayerKind, ins: &[&Vec<usize>], sig: &InputSignature) -> Result<Vec<usize>> {
    let one = || -> Result<&Vec<usize>> {
        ins.first().copied().ok_or_else(|| Error::shape("missing input"))
    };
    match kind {
        LayerKind::Input => Ok(sig.dims()),
        LayerKind::Conv { in_channels, out_channels, kernel, stride, padding, .. } => {
            let s = one()?;
            if s[0] != *in_channels {
                return Err(Error::shape(format!("expects {in_channels} channels, got {}", s[0])));
            }
            let sp = &s[1..];
            if kernel.len() != sp.len() || stride.len() != sp.len() || padding.len() != sp.len() {
                return Err(Error::shape(format!("kernel rank {} vs spatial rank {}", kernel.len(), sp.len())));
            }
            let mut out = vec![*out_channels];
            for d in 0..sp.len() {
                if sp[d] + 2 * padding[d] < kernel[d] {
                    return Err(Error::shape(format!(
                        "spatial dim {d} of extent {} is smaller than kernel {}",
                        sp[d], kernel[d]
                    )));
                }
                out.push((sp[d] + 2 * padding[d] - kernel[d]) / stride[d] + 1);
            }
            Ok(out)
        }
        LayerKind::MaxPool { window, stride, padding } => {
            let s = one()?;
            let mut out = vec![s[0]];
            for d in 0..window.len() {
                if s[1 + d] + 2 * padding[d] < window[d] {
                    return Err(Error::shape(format!("pool window {} exceeds extent {}", window[d], s[1 + d])));
                }
                out.push((s[1 + d] + 2 * padding[d] - window[d]) / stride[d] + 1);
            }
            Ok(out)
        }
        LayerKind::BatchNorm { channels } => {
            let s = one()?;
            if s[0] != *channels {
                return Err(Error::shape(format!("expects {channels} channels, got {}", s[0])));
            }
            Ok(s.clone())
        }
        LayerKind::Activation { .. } => Ok(one()?.clone()),
        LayerKind::GlobalAvgPool => Ok(vec![one()?[0]]),
        LayerKind::Dense { in_features, out_features } => {
            let s = one()?;
            if s.len() != 1 || s[0] != *in_features {
                return Err(Error::shape(format!("dense expects [{in_features}], got {s:?}")));
            }
            Ok(vec![*out_features])
        }
        LayerKind::Add => {
            if ins.len() != 2 || ins[0] != ins[1] {
                return Err(Error::shape(format!("add of mismatched shapes {ins:?}")));
            }
            Ok(ins[0].clone())
        }
        LayerKind::ConcatChannels => {
            let first = one()?;
            let mut c = 0;
            for s in ins {
                if s[1..] != first[1..] {
                    return Err(Error::shape(format!("concat of mismatched spatial shapes {ins:?}")));
                }
                c += s[0];
            }
            let mut out = first.clone();
            out[0] = c;
            Ok(out)
        }
        LayerKind::Upsample { factor, .. } => {
            let s = one()?;
            let mut out = s.clone();
            for (d, f) in factor.iter().enumerate() {
                out[1 + d] *= f;
            }
            Ok(out)
        }
    }
}

/// Incremental graph construction with shape propagation and weight init.
pub struct GraphBuilder<T: Element = f32> {
    kind: ModelKind,
    signature: InputSignature,
    nodes: Vec<Node>,
    shapes: Vec<Vec<usize>>,
    probes: BTreeMap<String, usize>,
    params: ParamStore<T>,
    buffers: IndexMap<String, Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> GraphBuilder<T> {
    pub fn new(kind: ModelKind, signature: InputSignature, seed: u64) -> Self {
        let input = Node { id: 0, label: "input".into(), kind: LayerKind::Input, inputs: vec![] };
        let shapes = vec![signature.dims()];
        GraphBuilder {
            kind,
            signature,
            nodes: vec![input],
            shapes,
            probes: BTreeMap::new(),
            params: ParamStore::new(),
            buffers: IndexMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub const INPUT: usize = 0;

    /// Per-sample shape of a node.
    pub fn shape(&self, node: usize) -> &[usize] {
        &self.shapes[node]
    }

    pub fn channels(&self, node: usize) -> usize {
        self.shapes[node][0]
    }

    pub fn spatial_rank(&self) -> usize {
        self.signature.spatial.len()
    }

    fn gaussian(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
    }

    pub fn push(&mut self, label: &str, kind: LayerKind, inputs: Vec<usize>) -> Result<usize> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::invalid(format!("`{label}` references unknown node {bad}")));
        }
        if self.nodes.iter().any(|n| n.label == label) {
            return Err(Error::invalid(format!("duplicate node label `{label}`")));
        }
        let ins: Vec<&Vec<usize>> = inputs.iter().map(|&i| &self.shapes[i]).collect();
        let shape = node_shape(&kind, &ins, &self.signature).map_err(|e| Error::Shape(format!("at `{label}`: {e}")))?;
        match &kind {
            LayerKind::Conv { in_channels, out_channels, kernel, bias, .. } => {
                let fan_in = in_channels * kernel.iter().product::<usize>();
                let mut wshape = vec![*out_channels, *in_channels];
                wshape.extend_from_slice(kernel);
                let w = self.gaussian(&wshape, (2.0 / fan_in as f64).sqrt())?;
                self.params.insert(format!("{label}.weight"), w)?;
                if *bias {
                    self.params.insert(format!("{label}.bias"), Tensor::zeros(&[*out_channels])?)?;
                }
            }
            LayerKind::Dense { in_features, out_features } => {
                let w = self.gaussian(&[*in_features, *out_features], (1.0 / *in_features as f64).sqrt())?;
                self.params.insert(format!("{label}.weight"), w)?;
                self.params.insert(format!("{label}.bias"), Tensor::zeros(&[*out_features])?)?;
            }
            LayerKind::BatchNorm { channels } => {
                self.params.insert(format!("{label}.gamma"), Tensor::ones(&[*channels])?)?;
                self.params.insert(format!("{label}.beta"), Tensor::zeros(&[*channels])?)?;
                self.buffers.insert(format!("{label}.running_mean"), Tensor::zeros(&[*channels])?);
                self.buffers.insert(format!("{label}.running_var"), Tensor::ones(&[*channels])?);
            }
            _ => {}
        }
        let id = self.nodes.len();
        self.nodes.push(Node { id, label: label.to_string(), kind, inputs });
        self.shapes.push(shape);
        Ok(id)
    }

    pub fn conv(
        &mut self,
        label: &str,
        input: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<usize> {
        let r = self.spatial_rank();
        let kind = LayerKind::Conv {
            in_channels: self.channels(input),
            out_channels,
            kernel: vec![kernel; r],
            stride: vec![stride; r],
            padding: vec![padding; r],
            bias,
            shortcut: false,
        };
        self.push(label, kind, vec![input])
    }

    pub fn shortcut_conv(&mut self, label: &str, input: usize, out_channels: usize, stride: usize) -> Result<usize> {
        let r = self.spatial_rank();
        let kind = LayerKind::Conv {
            in_channels: self.channels(input),
            out_channels,
            kernel: vec![1; r],
            stride: vec![stride; r],
            padding: vec![0; r],
            bias: false,
            shortcut: true,
        };
        self.push(label, kind, vec![input])
    }

    pub fn batch_norm(&mut self, label: &str, input: usize) -> Result<usize> {
        let channels = self.channels(input);
        self.push(label, LayerKind::BatchNorm { channels }, vec![input])
    }

    pub fn activation(&mut self, label: &str, input: usize, kind: Activation) -> Result<usize> {
        self.push(label, LayerKind::Activation { kind }, vec![input])
    }

    pub fn relu(&mut self, label: &str, input: usize) -> Result<usize> {
        self.activation(label, input, Activation::Relu)
    }

    pub fn max_pool(&mut self, label: &str, input: usize, window: usize, stride: usize, padding: usize) -> Result<usize> {
        let r = self.spatial_rank();
        let kind = LayerKind::MaxPool { window: vec![window; r], stride: vec![stride; r], padding: vec![padding; r] };
        self.push(label, kind, vec![input])
    }

    pub fn global_avg_pool(&mut self, label: &str, input: usize) -> Result<usize> {
        self.push(label, LayerKind::GlobalAvgPool, vec![input])
    }

    pub fn dense(&mut self, label: &str, input: usize, out_features: usize) -> Result<usize> {
        let in_features = self.shapes[input].iter().product();
        self.push(label, LayerKind::Dense { in_features, out_features }, vec![input])
    }

    pub fn add(&mut self, label: &str, a: usize, b: usize) -> Result<usize> {
        self.push(label, LayerKind::Add, vec![a, b])
    }

    pub fn concat(&mut self, label: &str, inputs: &[usize]) -> Result<usize> {
        self.push(label, LayerKind::ConcatChannels, inputs.to_vec())
    }

    pub fn upsample(&mut self, label: &str, input: usize, factor: usize, mode: UpsampleMode) -> Result<usize> {
        let r = self.spatial_rank();
        self.push(label, LayerKind::Upsample { factor: vec![factor; r], mode }, vec![input])
    }

    pub fn set_probe(&mut self, name: &str, node: usize) -> Result<()> {
        if node >= self.nodes.len() {
            return Err(Error::invalid(format!("probe `{name}` points at unknown node {node}")));
        }
        self.probes.insert(name.to_string(), node);
        Ok(())
    }

    pub fn finish(self, output: usize) -> Result<LayerGraph<T>> {
        if output >= self.nodes.len() {
            return Err(Error::invalid(format!("output node {output} does not exist")));
        }
        Ok(LayerGraph {
            kind: self.kind,
            signature: self.signature,
            nodes: self.nodes,
            output,
            probes: self.probes,
            params: self.params,
            buffers: self.buffers,
        })
    }
}
