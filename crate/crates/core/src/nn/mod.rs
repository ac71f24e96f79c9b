//! Minimal differentiable tensor machinery backing both network branches.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Graph, Gradients, Reduction, Var};
pub use kernels::ConvGeom;
pub use optim::{AdamW, AdamWConfig, ParamGrads};
pub use params::{init_rng, ParamBuilder, ParamId, ParamStore};
