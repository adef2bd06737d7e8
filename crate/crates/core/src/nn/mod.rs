//! Minimal float64 tensor engine with tape-based reverse-mode autodiff.

mod graph;
mod layers;
mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{apply_updates, Activation, BatchNorm, Conv2d, LayerNorm, Linear, Mode, Session};
pub use ops::{avg_pool_values, conv_output_size, softmax_rows, BatchStats, ConvSpec, Unary};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
