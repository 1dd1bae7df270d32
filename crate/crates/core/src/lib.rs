//! Framework-free volumetric deep learning: N-d tensors with reverse-mode
//! autodiff, 2D/3D bottleneck residual classifiers, a two-class U-Net, the
//! Adam / reduce-on-plateau / early-stopping training regime, classification
//! and overlap metrics, Grad-CAM and Seg-Grad-CAM, and a synthetic phantom
//! generator with ground truth.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
