//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Models train in
//! `f32`; gradient checks run the identical code in `f64`.

mod graph;
pub mod ops;
mod optim;
mod params;
mod scalar;

pub use graph::{softmax_last, Gradients, Graph, NodeId};
pub use ops::conv::Conv3dCfg;
pub use ops::norm::BatchStats;
pub use optim::Adam;
pub use params::{ParamEntry, ParamKind, ParamStore};
pub use scalar::Scalar;

pub use ndarray::{ArrayD, IxDyn};

pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
