//! Inference-time channel pruning for convolutional networks.
//!
//! Each layer is pruned in two steps: a LASSO regression over per-channel
//! contributions picks which input channels to keep, then the layer's
//! weights are refit by least squares so its output matches the original
//! network's. On top of that sit whole-model schedules that target a FLOP
//! speed-up and a residual-block variant that samples the branch entry and
//! compensates the shortcut at the block exit.
//!
//! Module map:
//!
//! - [`tensor`]: dense `f64` matrices, least squares, soft-thresholding
//! - [`graph`]: compute graph, serialization, BN folding, pruning rewrites
//! - [`infer`]: forward pass, im2col, FLOP counting
//! - [`sampler`]: datasets and per-layer `(X, Y)` sample matrices
//! - [`lasso`]: channel-selection LASSO and budgeted λ search
//! - [`pruner`]: single-layer, whole-model and residual-block pruning
//! - [`cli`]: the `chanprune` command-line front end
//! - [`zoo`]: seeded synthetic models used by examples and tests

pub mod cli;
pub mod error;
pub mod graph;
pub mod infer;
pub mod lasso;
pub mod pruner;
pub mod sampler;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, TensorShape};
pub use tensor::Matrix;
