//! Differentiable substrate and the transformer encoder.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{Graph, NodeGrads, NodeId};
pub use model::{Encoded, Model, ModelConfig};
pub use params::{ParamGrads, ParamStore};
pub use tensor::{Float, Tensor};
