//! Dense tensors and differentiable layer and loss primitives.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::{
    softmax_backward, softmax_forward, BatchNorm, BatchStats, Dense, Dropout, Layer, LayerCache, LayerKind, Mode,
    Parameter, PassContext,
};
pub use loss::{cross_entropy, one_hot, CrossEntropy};
pub use tensor::Tensor;
