use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::{InputSignature, LayerGraph, LayerKind, ModelKind};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: usize,
    pub label: String,
    pub op: String,
    /// Per-sample output shape `[C, spatial..]`.
    pub shape: Vec<usize>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub total_params: usize,
    /// Main-path convolutions plus dense layers.
    pub weighted_layers: usize,
}

impl AuditReport {
    pub fn row(&self, label: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:<28} {:<16} {:<22} {:>10}", "id", "layer", "op", "shape", "params")?;
        for r in &self.rows {
            let shape = r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            writeln!(f, "{:>5}  {:<28} {:<16} {:<22} {:>10}", r.id, r.label, r.op, shape, r.params)?;
        }
        writeln!(f, "total parameters: {}", self.total_params)?;
        write!(f, "weighted layers: {}", self.weighted_layers)
    }
}

fn param_count(kind: &LayerKind) -> usize {
    match kind {
        LayerKind::Conv { in_channels, out_channels, kernel, bias, .. } => {
            out_channels * in_channels * kernel.iter().product::<usize>() + if *bias { *out_channels } else { 0 }
        }
        LayerKind::Dense { in_features, out_features } => in_features * out_features + out_features,
        LayerKind::BatchNorm { channels } => 2 * channels,
        _ => 0,
    }
}

/// Propagates `signature` through the graph and tabulates shapes and parameter counts.
///
/// The input node is not listed.
pub fn audit_shapes<T: Element>(model: &LayerGraph<T>, signature: &InputSignature) -> Result<AuditReport> {
    let shapes = model.infer_shapes(signature)?;
    let rows: Vec<AuditRow> = model
        .nodes()
        .iter()
        .skip(1)
        .map(|n| AuditRow {
            id: n.id,
            label: n.label.clone(),
            op: n.kind.name().to_string(),
            shape: shapes[n.id].clone(),
            params: param_count(&n.kind),
        })
        .collect();
    let total_params = rows.iter().map(|r| r.params).sum();
    let weighted_layers = model.nodes().iter().filter(|n| n.kind.is_weighted_layer()).count();
    Ok(AuditReport { rows, total_params, weighted_layers })
}

/// Which convolution feeds a class activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLayer {
    /// Stem convolution output.
    First,
    /// Output of the final convolution of stage 3.
    Middle,
    /// Output of the final convolution of stage 5, before global pooling.
    Last,
}

impl ProbeLayer {
    pub const ALL: [ProbeLayer; 3] = [ProbeLayer::First, ProbeLayer::Middle, ProbeLayer::Last];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeLayer::First => "first",
            ProbeLayer::Middle => "middle",
            ProbeLayer::Last => "last",
        }
    }
}

impl fmt::Display for ProbeLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(ProbeLayer::First),
            "middle" => Ok(ProbeLayer::Middle),
            "last" => Ok(ProbeLayer::Last),
            other => Err(Error::invalid(format!("unknown probe layer `{other}` (expected first, middle or last)"))),
        }
    }
}

/// Node id of a classifier's probe layer.
pub fn select_probe_layer<T: Element>(model: &LayerGraph<T>, which: ProbeLayer) -> Result<usize> {
    if !matches!(model.kind(), ModelKind::Resnet2d | ModelKind::Resnet3d) {
        return Err(Error::invalid(format!("probe layers are defined for resnet classifiers, not {:?}", model.kind())));
    }
    model
        .probe(which.as_str())
        .ok_or_else(|| Error::invalid(format!("model has no `{which}` probe")))
}
