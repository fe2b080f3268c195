//! Dense `f64` tensors with a small reverse-mode tape.

pub mod gradcheck;
pub mod nn;
mod tape;
mod value;

pub use nn::{
    activation_relu, attention_block, dense_forward, mse, softmax_cross_entropy, AttentionVars,
    DenseVars,
};
pub use tape::{ErrorNorm, Gradients, Tape, Var, PROB_FLOOR};
pub use value::Tensor;
