//! Dual-branch change detection: a recurrent all-pairs optical flow branch
//! (slow change) feeding a warped-difference pyramid-pooling change branch
//! (fast change), plus a synthetic flow-and-change dataset forge, the composite
//! L2 + Tversky objective, the F1 / mEPE / FEPE metrics and a
//! train / evaluate / ablate / bench harness.

pub mod cd_branch;
pub mod domain;
pub mod error;
pub mod forge;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod of_branch;
pub mod par;
pub mod tensor;
pub mod viz;

pub use domain::{
    binarize, flow_magnitude, flow_to_color, BitemporalSample, ChangeMask, FlowColorCode,
    FlowField, Image, MaskKind, MaxMagnitude, ScalarMap,
};
pub use error::{Error, Result};
pub use par::Execution;
pub use tensor::Tensor;
