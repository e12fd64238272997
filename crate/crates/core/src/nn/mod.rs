//! Dense-network numerics: tensors, layers, manual backprop, optimizers,
//! gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};
pub use gradcheck::{finite_diff_check, max_relative_error, numeric_gradient};
pub use network::{Activation, Architecture, DenseLayer, ForwardTrace, LayerGrads, Network, ParamGrads};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;
