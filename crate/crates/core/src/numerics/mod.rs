//! Dense tensors, reverse-mode differentiation, deterministic randomness and
//! the Adam optimizer.

mod adam;
mod gradcheck;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, Objective, StoreObjective, TapeObjective};
pub use params::ParamStore;
pub use rng::{gaussian, Rng};
pub use scalar::Scalar;
pub use tape::{matmul_raw, CustomOp, Gradients, Primitive, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
