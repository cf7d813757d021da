//! Dense f64 tensors, a reverse-mode tape, the two transformer towers,
//! Adam, gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod sample;
pub mod tensor;

pub use checkpoint::{Checkpoint, LoadTrace};
pub use graph::{BatchLayout, Graph, NodeId};
pub use model::{combine_losses, DiscriminatorOutput, GeneratorOutput, Model, ModelConfig, TokenBatch, TowerConfig};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, ParamId, ParamStore};
pub use sample::sample_replacements;
pub use tensor::Tensor;
