//! Model construction: bottleneck residual classifiers and the U-Net.

pub mod audit;
pub mod graph;
pub mod resnet;
pub mod unet;

pub use audit::{audit_shapes, select_probe_layer, AuditReport, AuditRow, ProbeLayer};
pub use graph::{
    Descriptor, ForwardPass, GraphBuilder, InputSignature, LayerGraph, LayerKind, Mode, ModelKind, Node,
    DESCRIPTOR_VERSION,
};
pub use resnet::{build_resnet, ResnetConfig, WidthMultiplier};
pub use unet::{build_unet, UnetConfig, UNET_CLASSES};
