//! Minimal dense-tensor engine used by the MAgNet models.
//!
//! Values are row-major `f32` tensors. Differentiable computations are
//! recorded on a [`Tape`] as they execute and replayed in reverse by
//! [`Tape::backward`]. The primitive set is deliberately small: matmul,
//! elementwise arithmetic, row broadcast, ReLU, |x|, reductions, row
//! gather/scatter-add for message passing, layer normalization and concat.

mod checkpoint;
mod error;
mod nn;
mod optim;
mod reference;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use error::{Result, TensorError};
pub use nn::{init_mlp, layer_norm_affine, mlp_forward, Activation, InitScheme, MlpSpec};
pub use optim::{adam_step, steplr, AdamConfig, AdamState};
pub use reference::eval_f64;
pub use tape::{grad, Gradients, Op, Tape, Var};
pub use tensor::{ParamStore, Tensor};

/// Epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f32 = 1e-5;
