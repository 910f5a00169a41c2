//! Tape-based reverse-mode differentiation over dense arrays.

mod adam;
pub mod checkpoint;
pub mod fd;
mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{BatchNormMode, BatchStats, Graph, Var};
pub use kernels::CanvasLayout;
pub use params::{standard_normal, xavier_bound, xavier_uniform, Binding, ParamEntry, ParamId, ParamSet};
pub use scalar::{Precision, Real};
pub use tensor::Tensor;

