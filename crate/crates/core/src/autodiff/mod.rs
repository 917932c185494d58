//! Reverse-mode autodiff, parameter storage, optimizer and checkpoints.

mod checkpoint;
mod gemm;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{BoundParams, ParamStore};
pub use tensor::Tensor;
