//! Minimal differentiable-network kernel: matrices, dense/MLP parameters,
//! a reverse-mode gradient tape over a fixed primitive set, SGD with
//! momentum, and a finite-difference gradient checker.
//!
//! All arithmetic is 64-bit; reproducibility outranks speed at this scale.

pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod params;
pub mod sgd;
pub mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use ops::{cosine_sim, kl_from_logits, log_softmax, log_sum_exp, softmax, softmax_rows};
pub use params::{
    mlp_forward, Activation, DenseParams, MlpLayer, MlpParams, ParamTensors, TensorRole,
};
pub use sgd::{sgd_step, SgdState};
pub use tape::{mlp_forward_tape, mlp_grads, register_mlp, Gradients, Tape, TapeMlp, Var};
