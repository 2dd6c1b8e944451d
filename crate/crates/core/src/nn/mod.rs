//! Dense-tensor CNN core: layers, forward/backward, optimizers and a
//! finite-difference gradient oracle.

pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layer::{BatchNorm, Conv2d, ConvGeom, LayerSpec, Linear, Projection};
pub use network::{Mode, Network, ParameterBlock};
pub use optim::{OptimizerState, UpdateRule};
pub use tensor::{Scalar, Tensor};
