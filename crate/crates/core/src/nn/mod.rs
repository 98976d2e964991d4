//! Minimal tensor and gradient engine plus the MobileFaceNet-style classifier.

pub mod graph;
pub(crate) mod kernels;
pub mod mfn;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Mode, Var};
pub use mfn::{BottleneckStage, MfnSpec};
pub use params::{Group, Kind, Param, ParamId, ParamStore};
pub use tensor::Tensor;
