//! Tensors, a reverse-mode tape, optimizers and gradient verification.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{write_atomic, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, Offender};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{hex_digest, ParameterSet};
pub use tensor::{DType, Scalar, Tensor};
