//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! Every forward computation is recorded on a [`Tape`] as a flat list of
//! nodes in evaluation order. [`Tape::backward`] replays that list in reverse
//! and returns a [`Gradients`] table holding `d output / d leaf` for every
//! leaf that was created with gradient tracking.
//!
//! Trainable weights live in a [`ParamStore`]. A tape built with
//! [`Tape::with_params`] borrows the store, so parameters enter the graph
//! without being copied, and [`Gradients::param_grads`] maps the leaf
//! gradients back onto [`ParamId`]s for the optimizer.

mod error;
pub mod init;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::TensorError;
pub use optim::Sgd;
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{
    sigmoid, top_k_indices, Activation, Gradients, MlpLayer, Tape, Var, BCE_CLAMP, LN_EPS,
};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
