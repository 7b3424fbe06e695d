//! A minimal neural-network kernel: dense `f64` matrices, a reverse-mode tape,
//! pre-norm transformer layers, AdamW and parameter checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Grads, Graph, NodeId, ParamId, ParamSet};
pub use layers::{Encoder, EncoderLayer, LayerNorm, Linear, TransformerConfig};
pub use optim::{adamw_step, AdamState, OptimizerConfig};
pub use tensor::{softmax, Tensor2D};
